"""Message types and communication accounting for split training rounds.

Each selected client sends its cut-layer activations up (raw floats or a
quantized message), receives the cut-layer gradient back, and sends its
local parameter gradient up for server-side averaging; the averaged client
update is broadcast back down.  The ledger charges, per client and round:

* uplink activation bits: float_bits*d*B raw, or the serialized frame for a
  quantized message (header included, measured byte-for-byte);
* uplink sync bits: float_bits * |client parameters|;
* downlink bits: float_bits*d*B for the gradient plus the broadcast of the
  averaged client update.

Labels are never charged on either path, and compression ratios charge the
compressed activations only (no header, no labels).  All counts are integer
bits; divide by float_bits for float-equivalents.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import quantizer as pq


class AccountingMismatchError(RuntimeError):
    """Serializer-measured size disagreed with the formula (internal bug)."""


@dataclass
class RawActivations:
    values: np.ndarray  # (dim, batch)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("activations must be (dim, batch)")


@dataclass
class UplinkActivationMsg:
    """Client-to-server activations plus the labels that ride along."""

    payload: Union[RawActivations, pq.QuantizedMessage]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (self.batch,):
            raise ValueError("labels must have one entry per activation column")

    @property
    def quantized(self) -> bool:
        return isinstance(self.payload, pq.QuantizedMessage)

    @property
    def dim(self) -> int:
        if self.quantized:
            return self.payload.dim
        return self.payload.values.shape[0]

    @property
    def batch(self) -> int:
        if self.quantized:
            return self.payload.batch
        return self.payload.values.shape[1]

    def activation_bits(self, float_bits: int = 64) -> int:
        """Bits charged for the activation payload (labels excluded)."""
        if self.quantized:
            cfg = self.payload.config
            return pq.message_bits(cfg, self.dim, self.batch).wire
        return float_bits * self.dim * self.batch

    def ideal_bits(self, float_bits: int = 64) -> float:
        """Fractional-index accounting; equals the raw size when unquantized."""
        if self.quantized:
            cfg = self.payload.config
            return pq.message_bits(cfg, self.dim, self.batch).ideal
        return float(float_bits * self.dim * self.batch)


@dataclass
class DownlinkGradientMsg:
    """Server-to-client gradient of the batch loss at the cut layer."""

    grad: np.ndarray  # (dim, batch), one column per example

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.ndim != 2:
            raise ValueError("gradient must be (dim, batch)")

    def bits(self, float_bits: int = 64) -> int:
        return float_bits * self.grad.size


@dataclass
class ClientSyncMsg:
    """Client-to-server flattened parameter gradient for weighted averaging."""

    grad_vector: np.ndarray

    def __post_init__(self):
        self.grad_vector = np.asarray(self.grad_vector, dtype=np.float64)
        if self.grad_vector.ndim != 1:
            raise ValueError("sync payload must be a flat vector")

    def bits(self, float_bits: int = 64) -> int:
        return float_bits * self.grad_vector.size


@dataclass
class ClientExchange:
    """Everything one client moved during one round."""

    client_id: int
    uplink: UplinkActivationMsg
    downlink: DownlinkGradientMsg
    sync: ClientSyncMsg


@dataclass(frozen=True)
class LedgerRecord:
    round_index: int
    client_id: int
    uplink_act_bits: int
    uplink_sync_bits: int
    downlink_bits: int


CSV_HEADER = "round,client,uplink_act_bits,uplink_sync_bits,downlink_bits"


class CommLedger:
    """Append-only per-round, per-client bit counts with running totals."""

    def __init__(self):
        self.records: List[LedgerRecord] = []
        self._totals = {"uplink_act_bits": 0, "uplink_sync_bits": 0,
                        "downlink_bits": 0}

    def append(self, record: LedgerRecord) -> None:
        self.records.append(record)
        self._totals["uplink_act_bits"] += record.uplink_act_bits
        self._totals["uplink_sync_bits"] += record.uplink_sync_bits
        self._totals["downlink_bits"] += record.downlink_bits

    def extend(self, records) -> None:
        for r in records:
            self.append(r)

    @property
    def total_uplink_bits(self) -> int:
        return self._totals["uplink_act_bits"] + self._totals["uplink_sync_bits"]

    @property
    def total_downlink_bits(self) -> int:
        return self._totals["downlink_bits"]

    def totals(self) -> dict:
        return dict(self._totals)

    def float_equivalents(self, float_bits: int = 64) -> dict:
        return {k: v / float_bits for k, v in self._totals.items()}

    def to_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write_csv(path_or_file)
        else:
            with open(path_or_file, "w") as fh:
                self._write_csv(fh)

    def _write_csv(self, fh) -> None:
        fh.write(CSV_HEADER + "\n")
        for r in self.records:
            fh.write(f"{r.round_index},{r.client_id},{r.uplink_act_bits},"
                     f"{r.uplink_sync_bits},{r.downlink_bits}\n")

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()


def account_round(round_index: int, exchanges: List[ClientExchange],
                  float_bits: int = 64) -> List[LedgerRecord]:
    """Turn one round's exchanges into ledger records.

    For quantized uplinks the formula-predicted size is cross-checked against
    an actual serialization of the payload (labels stripped, since they are
    not charged); a disagreement is an internal error, never a data error.
    An empty round yields an empty delta.
    """
    records = []
    for ex in exchanges:
        act_bits = ex.uplink.activation_bits(float_bits)
        if ex.uplink.quantized:
            payload = ex.uplink.payload
            bare = pq.QuantizedMessage(payload.dim, payload.batch, payload.config,
                                       payload.codebook, payload.codewords, None)
            measured = 8 * len(pq.serialize(bare))
            if measured != act_bits:
                raise AccountingMismatchError(
                    f"serializer produced {measured} bits, formula said {act_bits}"
                )
        if ex.downlink.grad.shape[1] != ex.uplink.batch:
            raise ValueError("downlink batch does not match uplink batch")
        sync_bits = ex.sync.bits(float_bits)
        # the broadcast of the averaged client update mirrors the sync vector
        down_bits = ex.downlink.bits(float_bits) + sync_bits
        records.append(LedgerRecord(
            round_index=round_index,
            client_id=ex.client_id,
            uplink_act_bits=act_bits,
            uplink_sync_bits=sync_bits,
            downlink_bits=down_bits,
        ))
    return records


# ---------------------------------------------------------------------------
# per-round cost comparison of federated averaging vs split training


@dataclass(frozen=True)
class CostSummary:
    mode: str
    comm_floats: float
    comm_bits: float
    total_compute: str
    client_compute: str


def compare_costs(mode: str, total_params: int, client_params: int,
                  batch: int, cut_dim: int, local_steps: int = 1,
                  float_bits: int = 64) -> CostSummary:
    """Per-client, per-round communication and compute order for one mode.

    ``fedavg`` moves the whole model each round; split training moves the
    cut-layer batch plus the client half.  ``local_steps`` > 1 models the
    smaller per-step batch variant (batch/local_steps per exchange).
    """
    if min(total_params, client_params, batch, local_steps) < 1 or cut_dim < 0:
        raise ValueError("sizes must be positive (cut_dim may be zero)")
    if mode == "fedavg":
        floats = float(total_params)
        total = "O(batch * total_params)"
        client = "O(batch * total_params)"
    elif mode == "splitfed":
        floats = batch * cut_dim / local_steps + client_params
        total = "O(batch * total_params / local_steps)"
        client = "O(batch * client_params / local_steps)"
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return CostSummary(mode, floats, floats * float_bits, total, client)
