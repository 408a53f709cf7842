"""Round orchestration for split training, with and without quantization.

One round runs the four-step exchange for every selected client: activations
up, server loss and cut-layer gradient, corrected client backward, weighted
averaging of both halves' gradients, then a single SGD step per half.  All
per-client gradients are taken at the round's starting parameters and the
model moves only once per round, so a one-client round is arithmetically a
plain mini-batch SGD step.

Batch-mean convention: the server's downlink carries d(mean batch loss)/dZ,
one column per example.  The per-example correction lambda*(z - z_hat) from
the quantized path therefore enters scaled by 1/batch before the client
backward, which makes the client gradient exactly the gradient of the mean
of the per-example surrogate losses.

Sampling is hierarchically seeded (see select_clients / batch_indices) so an
external reference implementation can replay the exact client and batch
choices of any round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import quantizer as pq
from .federation import ClientDataset, Federation, as_arrays
from .nn import SplitModel, backward, forward, loss_and_grad, softmax_columns
from .protocol import (
    ClientExchange,
    ClientSyncMsg,
    CommLedger,
    DownlinkGradientMsg,
    RawActivations,
    UplinkActivationMsg,
    account_round,
)


@dataclass(frozen=True)
class TrainingConfig:
    client_lr: float
    server_lr: float
    batch_size: int
    clients_per_round: int
    rounds: int
    correction: float = 0.0
    quantize: bool = False
    quantizer: Optional[pq.QuantizerConfig] = None
    seed: int = 0
    probe_size: int = 128

    def __post_init__(self):
        if self.client_lr < 0 or self.server_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.correction < 0:
            raise ValueError("the correction coefficient must be non-negative")
        if self.batch_size < 1 or self.clients_per_round < 1:
            raise ValueError("batch size and clients per round must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.quantize and self.quantizer is None:
            raise ValueError("quantize=True needs a quantizer config")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.probe_size < 1:
            raise ValueError("probe_size must be >= 1")


@dataclass
class RoundTrace:
    round_index: int
    loss: float
    client_kappas: List[float]
    grad_norm_est: float = math.nan
    ledger_records: list = field(default_factory=list)

    @property
    def kappa_max(self) -> float:
        return max(self.client_kappas) if self.client_kappas else 0.0


TRACE_CSV_HEADER = "round,loss,kappa_max,grad_norm_est"


def export_traces(traces, path_or_file) -> None:
    """Write one CSV row per round: round,loss,kappa_max,grad_norm_est."""
    def write(fh):
        fh.write(TRACE_CSV_HEADER + "\n")
        for t in traces:
            fh.write(f"{t.round_index},{t.loss!r},{t.kappa_max!r},"
                     f"{t.grad_norm_est!r}\n")
    if hasattr(path_or_file, "write"):
        write(path_or_file)
    else:
        with open(path_or_file, "w") as fh:
            write(fh)


# ---------------------------------------------------------------------------
# deterministic sampling, replayable by outside reference code


def select_clients(num_clients: int, count: int, seed: int,
                   round_index: int) -> np.ndarray:
    """Uniform selection without replacement for one round."""
    if count > num_clients:
        raise ValueError(f"cannot select {count} of {num_clients} clients")
    rng = np.random.default_rng([seed, 1, round_index])
    return np.sort(rng.choice(num_clients, size=count, replace=False))


def batch_indices(n: int, batch_size: int, seed: int, round_index: int,
                  client_id: int) -> np.ndarray:
    """One client's batch for one round; with replacement only if it must."""
    rng = np.random.default_rng([seed, 2, round_index, client_id])
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def quantizer_seed(seed: int, round_index: int, client_id: int) -> int:
    entropy = np.random.SeedSequence([seed, 3, round_index, client_id])
    return int(entropy.generate_state(1)[0])


# ---------------------------------------------------------------------------
# building blocks


def aggregate_weighted(pairs: List[Tuple[float, np.ndarray]]) -> np.ndarray:
    """Weighted average sum(p*v)/sum(p); weights must not sum to zero."""
    if not pairs:
        raise ValueError("nothing to aggregate")
    total = math.fsum(p for p, _ in pairs)
    if total <= 0:
        raise ValueError("weights must sum to something positive")
    acc = None
    for p, v in pairs:
        term = p * np.asarray(v, dtype=np.float64)
        acc = term if acc is None else acc + term
    return acc / total


def corrected_upstream(server_grad: np.ndarray, activations: np.ndarray,
                       reconstructed: np.ndarray, correction: float) -> np.ndarray:
    """server_grad + correction * (activations - reconstructed), elementwise."""
    server_grad = np.asarray(server_grad, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if not (server_grad.shape == activations.shape == reconstructed.shape):
        raise ValueError("all three matrices must share one shape")
    return server_grad + correction * (activations - reconstructed)


def _client_batch(dataset: ClientDataset, cfg: TrainingConfig, round_index: int):
    idx = batch_indices(dataset.n, cfg.batch_size, cfg.seed, round_index,
                        dataset.client_id)
    return as_arrays([dataset.samples[i] for i in idx])


def _server_step(server_net, uplink: UplinkActivationMsg):
    # the server only ever sees what came over the wire: a quantized payload
    # is reconstructed here, the original activations never reach this side
    if uplink.quantized:
        z_in = pq.decode(uplink.payload)
    else:
        z_in = uplink.payload.values
    return loss_and_grad(server_net, z_in, uplink.labels)


def _finish_round(model, cfg, round_index, losses, ws_pairs, wc_pairs,
                  exchanges, kappas, ledger):
    agg_server = aggregate_weighted(ws_pairs)
    agg_client = aggregate_weighted(wc_pairs)
    model.server_net.sgd_step(agg_server, cfg.server_lr)
    model.client_net.sgd_step(agg_client, cfg.client_lr)
    records = account_round(round_index, exchanges)
    if ledger is not None:
        ledger.extend(records)
    total_p = math.fsum(p for p, _ in losses)
    mean_loss = math.fsum(p * l for p, l in losses) / total_p
    return RoundTrace(round_index, mean_loss, kappas, ledger_records=records)


def round_splitfed(model: SplitModel, selected, cfg: TrainingConfig,
                   round_index: int = 0,
                   ledger: Optional[CommLedger] = None) -> RoundTrace:
    """One unquantized round over ``selected`` = [(client, weight), ...].

    Weights are the client's share of the full federation; normalization by
    the selected subset's weight happens in the aggregation.  The model is
    updated in place, once, after every client's gradients are in.
    """
    losses, ws_pairs, wc_pairs, exchanges = [], [], [], []
    for client, weight in selected:
        x, y = _client_batch(client, cfg, round_index)
        z, cache = forward(model.client_net, x)
        uplink = UplinkActivationMsg(RawActivations(z), y)
        loss, ws_grad, cut_grad = _server_step(model.server_net, uplink)
        wc_grad, _ = backward(model.client_net, cache, cut_grad)
        losses.append((weight, loss))
        ws_pairs.append((weight, ws_grad.to_vector()))
        wc_pairs.append((weight, wc_grad.to_vector()))
        exchanges.append(ClientExchange(client.client_id, uplink,
                                        DownlinkGradientMsg(cut_grad),
                                        ClientSyncMsg(wc_pairs[-1][1])))
    return _finish_round(model, cfg, round_index, losses, ws_pairs, wc_pairs,
                         exchanges, [0.0] * len(selected), ledger)


def round_fedlite(model: SplitModel, selected, cfg: TrainingConfig,
                  round_index: int = 0,
                  ledger: Optional[CommLedger] = None) -> RoundTrace:
    """One quantized round: compressed uplink, corrected client backward.

    Clients re-decode their own message to get the server's view z_hat; the
    upstream handed to the client backward is the downlink gradient plus
    (correction / batch) * (z - z_hat), which averages the per-example
    correction into the batch-mean convention.  When the quantizer happens to
    be lossless this reduces to round_splitfed exactly.
    """
    if cfg.quantizer is None:
        raise ValueError("round_fedlite needs a quantizer config")
    losses, ws_pairs, wc_pairs, exchanges, kappas = [], [], [], [], []
    for client, weight in selected:
        x, y = _client_batch(client, cfg, round_index)
        z, cache = forward(model.client_net, x)
        msg = pq.encode(z, cfg.quantizer,
                        seed=quantizer_seed(cfg.seed, round_index, client.client_id),
                        labels=y)
        uplink = UplinkActivationMsg(msg, y)
        loss, ws_grad, cut_grad = _server_step(model.server_net, uplink)
        z_hat = pq.decode(msg)
        _, kappa = pq.quantization_error(z, z_hat)
        upstream = corrected_upstream(cut_grad, z, z_hat,
                                      cfg.correction / cfg.batch_size)
        wc_grad, _ = backward(model.client_net, cache, upstream)
        losses.append((weight, loss))
        ws_pairs.append((weight, ws_grad.to_vector()))
        wc_pairs.append((weight, wc_grad.to_vector()))
        kappas.append(kappa)
        exchanges.append(ClientExchange(client.client_id, uplink,
                                        DownlinkGradientMsg(cut_grad),
                                        ClientSyncMsg(wc_pairs[-1][1])))
    return _finish_round(model, cfg, round_index, losses, ws_pairs, wc_pairs,
                         exchanges, kappas, ledger)


# ---------------------------------------------------------------------------
# multi-round driver


@dataclass
class TrainResult:
    model: SplitModel
    traces: List[RoundTrace]
    ledger: CommLedger


def probe_gradient_norm(model: SplitModel, x: np.ndarray,
                        y: np.ndarray) -> float:
    """Norm of the full unquantized gradient on a fixed probe batch."""
    z, cache = forward(model.client_net, x)
    _, ws_grad, cut_grad = loss_and_grad(model.server_net, z, y)
    wc_grad, _ = backward(model.client_net, cache, cut_grad)
    stacked = np.concatenate([wc_grad.to_vector(), ws_grad.to_vector()])
    return float(np.linalg.norm(stacked))


def train(model: SplitModel, federation: Federation, cfg: TrainingConfig,
          round_callback=None) -> TrainResult:
    """Run ``cfg.rounds`` rounds, quantized or not, mutating ``model``.

    Each round samples clients uniformly without replacement, runs the
    exchange, then measures the exact gradient norm on a probe batch fixed
    at startup.  Zero rounds leaves the model untouched and the traces empty.
    ``round_callback(round_index, model)``, when given, runs after each
    round's update; it must not mutate the model.
    """
    if cfg.clients_per_round > federation.num_clients:
        raise ValueError(
            f"cannot select {cfg.clients_per_round} of "
            f"{federation.num_clients} clients")
    weights = federation.weights
    pooled = federation.all_samples()
    probe_rng = np.random.default_rng([cfg.seed, 4])
    probe_idx = probe_rng.choice(len(pooled),
                                 size=min(cfg.probe_size, len(pooled)),
                                 replace=False)
    probe_x, probe_y = as_arrays([pooled[i] for i in probe_idx])

    round_fn = round_fedlite if cfg.quantize else round_splitfed
    ledger = CommLedger()
    traces = []
    for t in range(cfg.rounds):
        chosen = select_clients(federation.num_clients, cfg.clients_per_round,
                                cfg.seed, t)
        selected = [(federation.clients[i], weights[i]) for i in chosen]
        trace = round_fn(model, selected, cfg, round_index=t, ledger=ledger)
        trace.grad_norm_est = probe_gradient_norm(model, probe_x, probe_y)
        traces.append(trace)
        if round_callback is not None:
            round_callback(t, model)
    return TrainResult(model, traces, ledger)


def evaluate(model: SplitModel, samples) -> Tuple[float, float]:
    """Accuracy and mean cross-entropy of the full split model on samples."""
    x, y = as_arrays(samples)
    z, _ = forward(model.client_net, x)
    logits, _ = forward(model.server_net, z)
    probs = softmax_columns(logits)
    predictions = probs.argmax(axis=0)
    accuracy = float((predictions == y).mean())
    loss = float(-np.log(probs[y, np.arange(y.size)]).mean())
    return accuracy, loss
