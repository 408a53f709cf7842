"""Experiment harness: key=value configs, single runs, quantizer sweeps.

A run is a pure function of its configuration and seed: every output file
(trace CSV, ledger CSV, eval CSV, diagnostics JSON) is byte-identical across
repeats.  Sweeps expand the quantizer grids into a Cartesian product, run
each point into its own subdirectory, and consolidate one summary CSV whose
ratio columns are recomputed, not copied, from the accounting formulas.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import analysis
from . import quantizer as pq
from .federation import generate_synthetic, load_csv, partition
from .nn import DenseNetwork, SplitModel
from .trainer import TrainingConfig, evaluate, export_traces, train

log = logging.getLogger("fedlite.harness")


class ConfigError(ValueError):
    """Bad experiment configuration; the message starts with the field name."""


# one entry per accepted key: (parser kind, default as config text)
_SCHEMA: Dict[str, Tuple[str, str]] = {
    "task": ("str", "synthetic"),
    "classes": ("int", "2"),
    "input_dim": ("int", "4"),
    "samples_per_class": ("int", "60"),
    "spread": ("float", "4.0"),
    "noise": ("float", "0.4"),
    "data_path": ("str", ""),
    "label_col": ("str", ""),
    "layer_sizes": ("int_list", "4, 8, 2"),
    "cut_index": ("int", "1"),
    "activation": ("str", "relu"),
    "client_lr": ("float", "0.3"),
    "server_lr": ("float", "0.3"),
    "batch_size": ("int", "16"),
    "clients_per_round": ("int", "3"),
    "rounds": ("int", "200"),
    "num_clients": ("int", "3"),
    "partition": ("str", "iid"),
    "shards_per_client": ("int", "1"),
    "eval_cadence": ("int", "20"),
    "eval_fraction": ("float", "0.1"),
    "probe_size": ("int", "128"),
    "quantize": ("bool", "false"),
    "subvectors": ("int_list", "8"),
    "groups": ("int_list", "1"),
    "centroids": ("int_list", "4"),
    "correction": ("float_list", "0.0"),
    "estimate_constants": ("bool", "false"),
    "objective_floor": ("float", "0.0"),
    "seed": ("int", "0"),
    "out_dir": ("str", ""),
    "workers": ("int", "1"),
}

ENV_PREFIX = "FEDLITE_"


@dataclass(frozen=True)
class ExperimentSpec:
    task: str
    classes: int
    input_dim: int
    samples_per_class: int
    spread: float
    noise: float
    data_path: str
    label_col: str
    layer_sizes: List[int]
    cut_index: int
    activation: str
    client_lr: float
    server_lr: float
    batch_size: int
    clients_per_round: int
    rounds: int
    num_clients: int
    partition: str
    shards_per_client: int
    eval_cadence: int
    eval_fraction: float
    probe_size: int
    quantize: bool
    subvectors: List[int]
    groups: List[int]
    centroids: List[int]
    correction: List[float]
    estimate_constants: bool
    objective_floor: float
    seed: int
    out_dir: str
    workers: int

    @property
    def cut_dim(self) -> int:
        return self.layer_sizes[self.cut_index]


# ---------------------------------------------------------------------------
# configuration parsing


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; # starts a comment line; later keys win."""
    mapping: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def apply_env_overrides(mapping: Dict[str, str], environ) -> Dict[str, str]:
    """Overlay FEDLITE_<KEY> environment values; unknown names are errors."""
    merged = dict(mapping)
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _SCHEMA:
            raise ConfigError(f"{name}: no configuration key named {key!r}")
        merged[key] = value
    return merged


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {value!r}")


def _parse_value(key: str, kind: str, value: str):
    try:
        if kind == "str":
            return value
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            return _parse_bool(key, value)
        if kind == "int_list":
            return [int(v.strip()) for v in value.split(",") if v.strip()]
        if kind == "float_list":
            return [float(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    raise AssertionError(f"unhandled kind {kind}")


def build_spec(mapping: Dict[str, str]) -> ExperimentSpec:
    """Typed, validated spec from raw key=value strings.

    Unknown keys are rejected by name; range and consistency problems raise
    :class:`ConfigError` whose message names the offending field.
    """
    unknown = sorted(set(mapping) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    values = {}
    for key, (kind, default) in _SCHEMA.items():
        values[key] = _parse_value(key, kind, mapping.get(key, default))
    spec = ExperimentSpec(**values)
    _validate_spec(spec)
    return spec


def _require(condition: bool, field_name: str, problem: str) -> None:
    if not condition:
        raise ConfigError(f"{field_name}: {problem}")


def _validate_spec(spec: ExperimentSpec) -> None:
    _require(spec.task in ("synthetic", "csv"), "task",
             f"must be 'synthetic' or 'csv', got {spec.task!r}")
    if spec.task == "csv":
        _require(bool(spec.data_path), "data_path",
                 "required when task = csv")
    else:
        _require(spec.classes >= 2, "classes", "need at least two classes")
        _require(spec.input_dim >= 1, "input_dim", "must be >= 1")
        _require(spec.samples_per_class >= 1, "samples_per_class",
                 "must be >= 1")
        _require(spec.spread >= 0 and spec.noise >= 0, "spread",
                 "spread and noise must be non-negative")
        _require(spec.layer_sizes[0] == spec.input_dim, "layer_sizes",
                 f"first entry must equal input_dim ({spec.input_dim})")
        _require(spec.layer_sizes[-1] >= spec.classes, "layer_sizes",
                 f"last entry must cover {spec.classes} classes")

    _require(len(spec.layer_sizes) >= 3, "layer_sizes",
             "need input, at least one cut width, and output")
    _require(all(s >= 1 for s in spec.layer_sizes), "layer_sizes",
             "every width must be >= 1")
    _require(1 <= spec.cut_index <= len(spec.layer_sizes) - 2, "cut_index",
             f"must lie in [1, {len(spec.layer_sizes) - 2}] so both sides "
             f"keep at least one layer")
    _require(spec.activation in ("relu", "tanh", "identity"), "activation",
             f"must be relu, tanh or identity, got {spec.activation!r}")

    _require(spec.client_lr >= 0 and spec.server_lr >= 0, "client_lr",
             "learning rates must be non-negative")
    _require(spec.batch_size >= 1, "batch_size", "must be >= 1")
    _require(spec.rounds >= 0, "rounds", "must be >= 0")
    _require(spec.num_clients >= 1, "num_clients", "must be >= 1")
    _require(1 <= spec.clients_per_round <= spec.num_clients,
             "clients_per_round",
             f"must lie in [1, {spec.num_clients}]")
    _require(spec.partition in ("iid", "label-shard"), "partition",
             f"must be 'iid' or 'label-shard', got {spec.partition!r}")
    _require(spec.shards_per_client >= 1, "shards_per_client", "must be >= 1")
    _require(spec.eval_cadence >= 0, "eval_cadence",
             "must be >= 0 (0 means final evaluation only)")
    _require(0.0 <= spec.eval_fraction <= 0.5, "eval_fraction",
             "must lie in [0, 0.5]")
    _require(spec.probe_size >= 1, "probe_size", "must be >= 1")
    _require(spec.seed >= 0, "seed", "must be non-negative")
    _require(spec.workers >= 1, "workers", "must be >= 1")

    for name, grid in (("subvectors", spec.subvectors),
                       ("groups", spec.groups),
                       ("centroids", spec.centroids),
                       ("correction", spec.correction)):
        _require(bool(grid), name, "grid must not be empty")
    _require(all(v >= 1 for v in spec.subvectors), "subvectors",
             "every value must be >= 1")
    _require(all(v >= 1 for v in spec.groups), "groups",
             "every value must be >= 1")
    _require(all(v >= 1 for v in spec.centroids), "centroids",
             "every value must be >= 1")
    _require(all(v >= 0 for v in spec.correction), "correction",
             "every value must be non-negative")


def default_spec(**overrides) -> ExperimentSpec:
    """The documented defaults, with keyword tweaks applied on top."""
    spec = build_spec({})
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
        _validate_spec(spec)
    return spec


# ---------------------------------------------------------------------------
# single runs


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _build_samples(spec: ExperimentSpec):
    if spec.task == "synthetic":
        return generate_synthetic(spec.classes, spec.input_dim,
                                  spec.samples_per_class, spec.spread,
                                  spec.noise, seed=_derive_seed(spec.seed, 9))
    label_col: object = spec.label_col or None
    if label_col is not None:
        try:
            label_col = int(label_col)
        except ValueError:
            pass
    samples = load_csv(spec.data_path, label_col=label_col)
    dim = samples[0].features.shape[0]
    classes = max(s.label for s in samples) + 1
    _require(spec.layer_sizes[0] == dim, "layer_sizes",
             f"first entry must equal the {dim} feature columns of "
             f"{spec.data_path}")
    _require(spec.layer_sizes[-1] >= classes, "layer_sizes",
             f"last entry must cover the {classes} labels of {spec.data_path}")
    return samples


def _split_heldout(samples, spec: ExperimentSpec):
    rng = np.random.default_rng([spec.seed, 5])
    order = rng.permutation(len(samples))
    n_eval = int(spec.eval_fraction * len(samples))
    eval_set = [samples[i] for i in order[:n_eval]]
    train_set = [samples[i] for i in order[n_eval:]]
    if not train_set:
        raise ConfigError("eval_fraction: nothing left to train on")
    return train_set, eval_set


def _build_model(spec: ExperimentSpec) -> SplitModel:
    sizes = spec.layer_sizes
    cut = spec.cut_index
    client = DenseNetwork.create(sizes[:cut + 1], [spec.activation] * cut,
                                 seed=_derive_seed(spec.seed, 6))
    server_acts = [spec.activation] * (len(sizes) - cut - 2) + ["softmax_ce"]
    server = DenseNetwork.create(sizes[cut:], server_acts,
                                 seed=_derive_seed(spec.seed, 7))
    return SplitModel(client, server)


def _scalar_grids(spec: ExperimentSpec) -> Tuple[int, int, int, float]:
    for name, grid in (("subvectors", spec.subvectors),
                       ("groups", spec.groups),
                       ("centroids", spec.centroids),
                       ("correction", spec.correction)):
        if len(grid) != 1:
            raise ConfigError(
                f"{name}: a single run takes one value, got {len(grid)} "
                f"(use the sweep command for grids)")
    return (spec.subvectors[0], spec.groups[0], spec.centroids[0],
            spec.correction[0])


@dataclass
class RunSummary:
    out_dir: str
    accuracy: float
    loss: float
    kappa_max: float
    uplink_bits: int
    downlink_bits: int
    ideal_ratio: float
    wire_ratio: float


def run_single(spec: ExperimentSpec) -> RunSummary:
    """Train once per the spec and write the four metric files.

    ``trace.csv`` has one row per round, ``ledger.csv`` one per client and
    round, ``eval.csv`` one per held-out evaluation (the round column counts
    completed rounds), and ``diagnostics.json`` the run summary.  All four
    are deterministic in (spec, seed).
    """
    if not spec.out_dir:
        raise ConfigError("out_dir: required (set it or pass --out-dir)")
    q, r, l, lam = _scalar_grids(spec)
    qcfg = None
    if spec.quantize:
        try:
            qcfg = pq.QuantizerConfig(subvectors=q, groups=r, centroids=l)
            qcfg.validate_dim(spec.cut_dim)
        except pq.QuantizerConfigError as exc:
            raise ConfigError(f"subvectors: {exc}") from None

    samples = _build_samples(spec)
    train_set, eval_set = _split_heldout(samples, spec)
    notes = []
    if not eval_set:
        eval_set = train_set
        notes.append("eval_fraction rounded to zero samples; "
                     "evaluating on the training data")
    federation = partition(train_set, spec.num_clients, mode=spec.partition,
                           shards_per_client=spec.shards_per_client,
                           seed=_derive_seed(spec.seed, 8))
    model = _build_model(spec)
    cfg = TrainingConfig(
        client_lr=spec.client_lr, server_lr=spec.server_lr,
        batch_size=spec.batch_size, clients_per_round=spec.clients_per_round,
        rounds=spec.rounds, correction=lam if spec.quantize else 0.0,
        quantize=spec.quantize, quantizer=qcfg, seed=spec.seed,
        probe_size=spec.probe_size)

    evals: List[Tuple[int, float, float]] = []

    def maybe_eval(t, current):
        if spec.eval_cadence and (t + 1) % spec.eval_cadence == 0:
            acc, loss = evaluate(current, eval_set)
            evals.append((t + 1, acc, loss))

    result = train(model, federation, cfg, round_callback=maybe_eval)
    if not evals or evals[-1][0] != spec.rounds:
        acc, loss = evaluate(model, eval_set)
        evals.append((spec.rounds, acc, loss))
    final_acc, final_loss = evals[-1][1], evals[-1][2]
    kappa_max = max((t.kappa_max for t in result.traces), default=0.0)

    os.makedirs(spec.out_dir, exist_ok=True)
    export_traces(result.traces, os.path.join(spec.out_dir, "trace.csv"))
    result.ledger.to_csv(os.path.join(spec.out_dir, "ledger.csv"))
    with open(os.path.join(spec.out_dir, "eval.csv"), "w") as fh:
        fh.write("round,accuracy,loss\n")
        for t, acc, loss in evals:
            fh.write(f"{t},{acc!r},{loss!r}\n")

    ideal_ratio = wire_ratio = 1.0
    quantizer_info = None
    if qcfg is not None:
        bits = pq.message_bits(qcfg, spec.cut_dim, spec.batch_size)
        ideal_ratio, wire_ratio = bits.ideal_ratio, bits.wire_ratio
        quantizer_info = {"subvectors": q, "groups": r, "centroids": l,
                          "correction": lam, "ideal_ratio": ideal_ratio,
                          "wire_ratio": wire_ratio}

    payload = {
        "task": spec.task,
        "seed": spec.seed,
        "rounds": spec.rounds,
        "train_samples": len(train_set),
        "eval_samples": len(eval_set),
        "accuracy": final_acc,
        "loss": final_loss,
        "kappa_max": kappa_max,
        "total_uplink_bits": result.ledger.total_uplink_bits,
        "total_downlink_bits": result.ledger.total_downlink_bits,
        "quantize": spec.quantize,
        "quantizer": quantizer_info,
        "notes": notes,
    }
    if spec.estimate_constants:
        report = analysis.estimate_constants(
            model, train_set, batch_size=spec.batch_size,
            seed=spec.seed, objective_floor=spec.objective_floor)
        suggestion = analysis.best_correction(
            report.constants, spec.batch_size, spec.clients_per_round,
            max(spec.rounds, 1), kappa_max)
        payload["constants"] = report.to_dict()
        payload["suggested_correction"] = suggestion
    with open(os.path.join(spec.out_dir, "diagnostics.json"), "w") as fh:
        fh.write(analysis.to_json(payload))

    summary = RunSummary(
        out_dir=spec.out_dir, accuracy=final_acc, loss=final_loss,
        kappa_max=kappa_max,
        uplink_bits=result.ledger.total_uplink_bits,
        downlink_bits=result.ledger.total_downlink_bits,
        ideal_ratio=ideal_ratio, wire_ratio=wire_ratio)
    return summary


# ---------------------------------------------------------------------------
# sweeps


SWEEP_CSV_HEADER = ("subvectors,groups,centroids,correction,"
                    "ideal_ratio,wire_ratio,accuracy,loss,kappa_max,"
                    "uplink_bits")


@dataclass
class SweepOutcome:
    rows: List[tuple]
    failures: List[Tuple[tuple, str]]
    skipped: List[Tuple[int, int]] = field(default_factory=list)


def _point_dir(out_dir: str, point: tuple) -> str:
    q, r, l, lam = point
    return os.path.join(out_dir, f"q{q}_r{r}_l{l}_lam{lam:g}")


def _point_spec(spec: ExperimentSpec, point: tuple) -> ExperimentSpec:
    q, r, l, lam = point
    return dataclasses.replace(
        spec, subvectors=[q], groups=[r], centroids=[l], correction=[lam],
        out_dir=_point_dir(spec.out_dir, point), workers=1)


def _run_point(child: ExperimentSpec) -> RunSummary:
    return run_single(child)


def run_sweep(spec: ExperimentSpec) -> SweepOutcome:
    """Run every valid grid point and consolidate ``sweep.csv``.

    Pairs violating the divisibility rules (subvectors dividing the cut
    width, groups dividing subvectors) are skipped up front with a logged
    notice.  A failing point is recorded and the sweep continues; rows are
    sorted by (subvectors, groups, centroids, correction).
    """
    if not spec.out_dir:
        raise ConfigError("out_dir: required (set it or pass --out-dir)")
    grid_size = (len(set(spec.subvectors)) * len(set(spec.groups))
                 * len(set(spec.centroids)) * len(set(spec.correction)))
    if not spec.quantize and grid_size > 1:
        raise ConfigError("quantize: sweeping quantizer grids needs "
                          "quantize = true")

    d = spec.cut_dim
    skipped = []
    for q, r in itertools.product(sorted(set(spec.subvectors)),
                                  sorted(set(spec.groups))):
        if d % q != 0 or q % r != 0:
            skipped.append((q, r))
            log.warning("skipping subvectors=%d groups=%d: "
                        "need subvectors | cut width (%d) and "
                        "groups | subvectors", q, r, d)
    points = [
        (q, r, l, lam)
        for q in sorted(set(spec.subvectors))
        for r in sorted(set(spec.groups))
        if (q, r) not in skipped
        for l in sorted(set(spec.centroids))
        for lam in sorted(set(spec.correction))
    ]
    if not points:
        raise ConfigError("subvectors: no valid grid points "
                          f"(cut width {d}; skipped {len(skipped)} pairs)")

    os.makedirs(spec.out_dir, exist_ok=True)
    results: Dict[tuple, RunSummary] = {}
    failures: List[Tuple[tuple, str]] = []
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = {point: pool.submit(_run_point, _point_spec(spec, point))
                       for point in points}
            for point, future in futures.items():
                exc = future.exception()
                if exc is not None:
                    failures.append((point, f"{type(exc).__name__}: {exc}"))
                else:
                    results[point] = future.result()
    else:
        for point in points:
            try:
                results[point] = _run_point(_point_spec(spec, point))
            except Exception as exc:
                failures.append((point, f"{type(exc).__name__}: {exc}"))

    rows = []
    for point in sorted(results):
        q, r, l, lam = point
        s = results[point]
        rows.append((q, r, l, lam, s.ideal_ratio, s.wire_ratio, s.accuracy,
                     s.loss, s.kappa_max, s.uplink_bits))
    with open(os.path.join(spec.out_dir, "sweep.csv"), "w") as fh:
        fh.write(SWEEP_CSV_HEADER + "\n")
        for row in rows:
            q, r, l, lam, ideal, wire, acc, loss, kappa, up = row
            fh.write(f"{q},{r},{l},{lam!r},{ideal!r},{wire!r},"
                     f"{acc!r},{loss!r},{kappa!r},{up}\n")
    failures.sort(key=lambda item: item[0])
    if failures:
        with open(os.path.join(spec.out_dir, "failures.txt"), "w") as fh:
            for point, message in failures:
                q, r, l, lam = point
                fh.write(f"q={q} r={r} l={l} lam={lam!r}: {message}\n")
        for point, message in failures:
            log.error("sweep point %s failed: %s", point, message)
    return SweepOutcome(rows, failures, skipped)


# ---------------------------------------------------------------------------
# error-versus-ratio tables


@dataclass(frozen=True)
class TradeoffRow:
    config: pq.QuantizerConfig
    mean_error: float
    ideal_ratio: float
    wire_ratio: float


def tradeoff_table(configs, activations: np.ndarray,
                   seed: int = 0) -> List[TradeoffRow]:
    """Quantize one activation batch under each config; report error vs ratio.

    The error is the mean per-example distortion norm over the batch, the
    ratios come straight from the size formulas, so rows are comparable
    across group counts, subvector counts and codebook sizes.
    """
    activations = np.asarray(activations, dtype=np.float64)
    dim, batch = activations.shape
    rows = []
    for cfg in configs:
        cfg.validate_dim(dim)
        msg = pq.encode(activations, cfg, seed=seed)
        errors, _ = pq.quantization_error(activations, pq.decode(msg))
        bits = pq.message_bits(cfg, dim, batch)
        rows.append(TradeoffRow(cfg, float(np.mean(errors)),
                                bits.ideal_ratio, bits.wire_ratio))
    return rows
