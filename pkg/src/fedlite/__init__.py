"""Split federated learning with product-quantized activation exchange.

The package simulates a server and a set of clients training a network cut
in two.  Clients push cut-layer activations uplink, optionally compressed by
grouped product quantization; the server pushes loss gradients back down.
Every bit on the wire is accounted for, and a correction term on the client
backward pass compensates for the compression error.

Typical entry points: :func:`fedlite.train` for programmatic use, the
``fedlite`` console script for config-driven runs and sweeps.
"""

from .analysis import (
    AnalysisConstants,
    ConstantsReport,
    best_correction,
    convergence_bound,
    estimate_constants,
    hessian_spectral_norm,
    jacobian_spectral_norm,
    mixed_spectral_norm,
    noise_term,
    optimization_term,
    power_iteration_norm,
    quantization_term,
)
from .federation import (
    ClientDataset,
    DataSample,
    DatasetFormatError,
    Federation,
    generate_synthetic,
    load_csv,
    partition,
    save_csv,
)
from .harness import ConfigError, ExperimentSpec, build_spec, default_spec, run_single, run_sweep
from .nn import DenseNetwork, SplitModel, backward, forward, loss_and_grad
from .protocol import CommLedger, LedgerRecord, account_round, compare_costs
from .quantizer import (
    MessageBits,
    QuantizedMessage,
    QuantizerConfig,
    decode,
    deserialize,
    encode,
    kmeans,
    message_bits,
    quantization_error,
    serialize,
)
from .trainer import (
    RoundTrace,
    TrainingConfig,
    TrainResult,
    evaluate,
    round_fedlite,
    round_splitfed,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisConstants",
    "ClientDataset",
    "CommLedger",
    "ConfigError",
    "ConstantsReport",
    "DataSample",
    "DatasetFormatError",
    "DenseNetwork",
    "ExperimentSpec",
    "Federation",
    "LedgerRecord",
    "MessageBits",
    "QuantizedMessage",
    "QuantizerConfig",
    "RoundTrace",
    "SplitModel",
    "TrainResult",
    "TrainingConfig",
    "account_round",
    "backward",
    "best_correction",
    "build_spec",
    "compare_costs",
    "convergence_bound",
    "decode",
    "default_spec",
    "deserialize",
    "encode",
    "estimate_constants",
    "evaluate",
    "forward",
    "generate_synthetic",
    "hessian_spectral_norm",
    "jacobian_spectral_norm",
    "kmeans",
    "load_csv",
    "loss_and_grad",
    "message_bits",
    "mixed_spectral_norm",
    "noise_term",
    "optimization_term",
    "partition",
    "power_iteration_norm",
    "quantization_error",
    "quantization_term",
    "round_fedlite",
    "round_splitfed",
    "run_single",
    "run_sweep",
    "save_csv",
    "serialize",
    "train",
    "__version__",
]
