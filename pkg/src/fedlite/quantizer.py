"""Grouped product quantization of activation batches.

An activation matrix Z of shape (d, B) is cut column-wise into q subvectors
of length d/q.  Subvector positions are stacked into R contiguous groups
(position s belongs to group floor(s / (q/R))), each group gets its own
codebook of L centroids fitted by k-means on every subvector the group sees,
and each subvector is replaced by the index of its nearest centroid.
Shrinking R shares one codebook across more positions, which is where the
transmission savings come from: the codebook costs float_bits*(d/q)*R*L bits
while the indices cost B*q*log2(L).

The binary wire format lives here too, next to the accounting that has to
match it byte for byte.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class QuantizerConfigError(ValueError):
    """Invalid quantizer shape parameters (raised before any compute)."""


class CorruptMessageError(ValueError):
    """Serialized or in-memory message fails structural validation."""


@dataclass(frozen=True)
class QuantizerConfig:
    """Shape of the quantizer: q subvectors, R codebook groups, L centroids.

    ``float_bits`` is the accounting width of one raw scalar on the wire.
    """

    subvectors: int
    groups: int
    centroids: int
    float_bits: int = 64

    def __post_init__(self):
        if self.subvectors < 1:
            raise QuantizerConfigError("subvectors must be >= 1")
        if self.groups < 1:
            raise QuantizerConfigError("groups must be >= 1")
        if self.centroids < 1:
            raise QuantizerConfigError("centroids must be >= 1")
        if self.float_bits < 1:
            raise QuantizerConfigError("float_bits must be >= 1")
        if self.subvectors % self.groups != 0:
            raise QuantizerConfigError(
                f"groups ({self.groups}) must divide subvectors ({self.subvectors})"
            )

    def validate_dim(self, dim: int) -> None:
        if dim < 1:
            raise QuantizerConfigError("activation dimension must be >= 1")
        if dim % self.subvectors != 0:
            raise QuantizerConfigError(
                f"subvectors ({self.subvectors}) must divide the activation "
                f"dimension ({dim})"
            )

    @property
    def index_width(self) -> int:
        """Bits per stored codeword index, ceil(log2(centroids))."""
        return (self.centroids - 1).bit_length()


def group_of(position: int, subvectors: int, groups: int) -> int:
    """Codebook group owning subvector ``position``; contiguous blocks."""
    if not 0 <= position < subvectors:
        raise QuantizerConfigError(
            f"position {position} outside [0, {subvectors})"
        )
    if subvectors % groups != 0:
        raise QuantizerConfigError("groups must divide subvectors")
    return position // (subvectors // groups)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray      # (dim, n_centroids)
    assignments: np.ndarray    # (n_points,) int
    inertia: float
    inertia_history: list
    iterations: int
    converged: bool


def _squared_distances(x, c):
    # (n, k) matrix of ||x_i - c_j||^2 via the expanded form
    d2 = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :]
    d2 -= 2.0 * x @ c.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def nearest_centroids(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per point, ties to the lowest index.

    Both arguments are column-major: points (dim, n), centroids (dim, k).
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if points.ndim != 2 or centroids.ndim != 2 or points.shape[0] != centroids.shape[0]:
        raise ValueError("points and centroids must share their leading dimension")
    return np.argmin(_squared_distances(points.T, centroids.T), axis=1)


def _exact_inertia(x, c, assign):
    diff = x - c[assign]
    return float((diff * diff).sum())


def _plus_plus_seeding(x, k, rng):
    n = x.shape[0]
    chosen = np.empty((k, x.shape[1]))
    idx = int(rng.integers(n))
    chosen[0] = x[idx]
    d2 = ((x - chosen[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point already coincides with a chosen centroid
            idx = int(rng.integers(n))
        chosen[j] = x[idx]
        d2 = np.minimum(d2, ((x - chosen[j]) ** 2).sum(axis=1))
    return chosen


def kmeans(points: np.ndarray, n_centroids: int, seed, max_iters: int = 50) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on column-point data.

    ``points`` has shape (dim, n): one point per column, matching the
    activation layout used everywhere else.  Ties in the assignment step go
    to the lowest centroid index.  An emptied cluster is reseeded at the
    point farthest from the empty centroid's current position.  When
    ``n_centroids`` is at least the number of distinct points the exact
    cover is returned directly (surplus centroids duplicate points) with
    zero inertia.  The recorded inertia history never increases: Lloyd
    cannot increase inertia in exact arithmetic, so an increase at rounding
    scale is treated as convergence and the previous state is kept.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be (dim, n)")
    if points.shape[1] < 1:
        raise ValueError("need at least one point")
    if n_centroids < 1:
        raise ValueError("need at least one centroid")
    x = np.ascontiguousarray(points.T)  # (n, dim) rows for the math below
    n = x.shape[0]

    distinct, inverse = np.unique(x, axis=0, return_inverse=True)
    if n_centroids >= distinct.shape[0]:
        reps = np.arange(n_centroids) % distinct.shape[0]
        centroids = distinct[reps]
        return KMeansResult(
            centroids=centroids.T.copy(),
            assignments=inverse.reshape(-1).astype(np.int64),
            inertia=0.0,
            inertia_history=[0.0],
            iterations=0,
            converged=True,
        )

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seeding(x, n_centroids, rng)

    best_inertia = math.inf
    best_centroids = centroids
    best_assign = None
    history = []
    prev_assign = None
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        assign = np.argmin(_squared_distances(x, centroids), axis=1)
        inertia = _exact_inertia(x, centroids, assign)
        if inertia > best_inertia:
            # only reachable through rounding noise at convergence
            converged = True
            break
        history.append(inertia)
        best_inertia = inertia
        best_centroids = centroids.copy()
        best_assign = assign
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            converged = True
            break
        prev_assign = assign

        new_centroids = centroids.copy()
        counts = np.bincount(assign, minlength=n_centroids)
        for j in range(n_centroids):
            if counts[j] > 0:
                new_centroids[j] = x[assign == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            taken = set()
            for j in empty:
                dist = ((x - centroids[j]) ** 2).sum(axis=1)
                order = np.argsort(dist)[::-1]
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_centroids[j] = x[pick]
        centroids = new_centroids

    return KMeansResult(
        centroids=best_centroids.T.copy(),
        assignments=best_assign.astype(np.int64),
        inertia=best_inertia,
        inertia_history=history,
        iterations=iterations,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# encode / decode


@dataclass
class QuantizedMessage:
    """One compressed activation batch: shared codebooks plus index matrix."""

    dim: int
    batch: int
    config: QuantizerConfig
    codebook: np.ndarray    # (groups, centroids, dim/subvectors)
    codewords: np.ndarray   # (batch, subvectors) int
    labels: Optional[np.ndarray] = None

    def validate(self) -> None:
        cfg = self.config
        cfg.validate_dim(self.dim)
        if self.batch < 1:
            raise CorruptMessageError("batch must be >= 1")
        sub_dim = self.dim // cfg.subvectors
        if self.codebook.shape != (cfg.groups, cfg.centroids, sub_dim):
            raise CorruptMessageError(
                f"codebook shape {self.codebook.shape} does not match config "
                f"({cfg.groups}, {cfg.centroids}, {sub_dim})"
            )
        if self.codewords.shape != (self.batch, cfg.subvectors):
            raise CorruptMessageError(
                f"codeword shape {self.codewords.shape} does not match "
                f"({self.batch}, {cfg.subvectors})"
            )
        if self.codewords.size and (
            self.codewords.min() < 0 or self.codewords.max() >= cfg.centroids
        ):
            raise CorruptMessageError("codeword index out of range")
        if self.labels is not None and self.labels.shape != (self.batch,):
            raise CorruptMessageError("labels must have one entry per column")


def encode(z: np.ndarray, config: QuantizerConfig, seed=0,
           labels: Optional[np.ndarray] = None) -> QuantizedMessage:
    """Quantize a (d, B) activation batch.

    Codebooks are fitted fresh on this batch (one k-means per group, seeded
    from ``seed`` and the group index) and every subvector is assigned to
    its nearest centroid, ties to the lowest index.  Deterministic for a
    fixed (z, config, seed).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("activations must be (dim, batch)")
    dim, batch = z.shape
    config.validate_dim(dim)
    if batch < 1:
        raise ValueError("cannot encode an empty batch")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (batch,):
            raise ValueError("labels must have one entry per column")

    q, r_groups, n_cent = config.subvectors, config.groups, config.centroids
    sub_dim = dim // q
    per_group = q // r_groups
    zs = np.ascontiguousarray(z).reshape(q, sub_dim, batch)

    codebook = np.empty((r_groups, n_cent, sub_dim))
    codewords = np.empty((batch, q), dtype=np.int64)
    for r in range(r_groups):
        block = zs[r * per_group:(r + 1) * per_group]       # (per_group, sub_dim, B)
        pts = block.transpose(1, 0, 2).reshape(sub_dim, per_group * batch)
        fit = kmeans(pts, n_cent, seed=[_seed_scalar(seed), r])
        codebook[r] = fit.centroids.T
        # nearest-centroid assignment against the final codebook
        assign = nearest_centroids(pts, fit.centroids).reshape(per_group, batch)
        codewords[:, r * per_group:(r + 1) * per_group] = assign.T

    msg = QuantizedMessage(dim, batch, config, codebook, codewords,
                           None if labels is None else labels.copy())
    msg.validate()
    return msg


def _seed_scalar(seed) -> int:
    # collapse whatever seed material the caller passed into one integer
    # stream so the per-group seed is always [int, group]
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(list(seed)).generate_state(1)[0])


def decode(msg: QuantizedMessage) -> np.ndarray:
    """Reconstruct the (d, B) activation matrix a message describes."""
    msg.validate()
    cfg = msg.config
    q = cfg.subvectors
    sub_dim = msg.dim // q
    group_idx = np.arange(q) // (q // cfg.groups)
    # (B, q, sub_dim) gather, then stitch columns back together
    gathered = msg.codebook[group_idx[None, :], msg.codewords]
    return gathered.transpose(1, 2, 0).reshape(msg.dim, msg.batch).copy()


def quantization_error(z: np.ndarray, z_hat: np.ndarray):
    """Per-column L2 reconstruction errors and their max over the batch."""
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape or z.ndim != 2:
        raise ValueError("activation matrices must share a (dim, batch) shape")
    errors = np.linalg.norm(z - z_hat, axis=0)
    return errors, float(errors.max())


# ---------------------------------------------------------------------------
# size accounting

MAGIC = b"FQL1"
_HEADER = struct.Struct("<4s5IB")  # magic, dim, batch, subvectors, groups, centroids, labels flag
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class MessageBits:
    """Exact bit accounting for one quantized activation message.

    ``ideal`` charges fractional bits per index (B*q*log2(L)); the wire
    numbers charge ceil(log2(L)) per index plus byte padding and the fixed
    header, matching :func:`serialize` exactly.
    """

    raw_bits: int
    header_bits: int
    codebook_bits: int
    codeword_bits: int
    padding_bits: int
    label_bits: int
    ideal: float

    @property
    def wire(self) -> int:
        return (self.header_bits + self.codebook_bits + self.codeword_bits
                + self.padding_bits + self.label_bits)

    @property
    def wire_payload(self) -> int:
        """Wire bits minus header and labels: the compressed activations."""
        return self.codebook_bits + self.codeword_bits + self.padding_bits

    @property
    def ideal_ratio(self) -> float:
        return self.raw_bits / self.ideal

    @property
    def wire_ratio(self) -> float:
        return self.raw_bits / self.wire_payload


def message_bits(config: QuantizerConfig, dim: int, batch: int,
                 labels_present: bool = False) -> MessageBits:
    """Bit cost of sending one (dim, batch) activation matrix quantized."""
    config.validate_dim(dim)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    q, r_groups, n_cent = config.subvectors, config.groups, config.centroids
    codebook_bits = config.float_bits * (dim // q) * r_groups * n_cent
    width = config.index_width
    codeword_bits = batch * q * width
    padded = 8 * ((codeword_bits + 7) // 8)
    ideal = codebook_bits + batch * q * math.log2(n_cent)
    return MessageBits(
        raw_bits=config.float_bits * dim * batch,
        header_bits=8 * HEADER_BYTES,
        codebook_bits=codebook_bits,
        codeword_bits=codeword_bits,
        padding_bits=padded - codeword_bits,
        label_bits=32 * batch if labels_present else 0,
        ideal=ideal,
    )


# ---------------------------------------------------------------------------
# wire format


def _pack_indices(values: np.ndarray, width: int) -> bytes:
    if width == 0:
        return b""
    bits = (values.reshape(-1, 1) >> np.arange(width - 1, -1, -1)) & 1
    return np.packbits(bits.astype(np.uint8).ravel()).tobytes()


def _unpack_indices(blob: bytes, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=count * width)
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, width) @ weights


def serialize(msg: QuantizedMessage) -> bytes:
    """Encode a message to the FQL1 byte layout.

    Header: magic, then dim/batch/subvectors/groups/centroids as u32 LE,
    then a labels-present byte.  Codebook: float64 LE, group-major then
    centroid-major then element-major.  Codewords: ceil(log2(L)) bits each,
    MSB first, batch-row-major, zero-padded to a byte.  Labels: u32 LE.
    """
    msg.validate()
    cfg = msg.config
    if msg.labels is not None:
        labels = np.asarray(msg.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= 2 ** 32):
            raise ValueError("labels must fit in an unsigned 32-bit integer")
    parts = [
        _HEADER.pack(MAGIC, msg.dim, msg.batch, cfg.subvectors, cfg.groups,
                     cfg.centroids, 0 if msg.labels is None else 1),
        np.ascontiguousarray(msg.codebook, dtype="<f8").tobytes(),
        _pack_indices(msg.codewords, cfg.index_width),
    ]
    if msg.labels is not None:
        parts.append(np.ascontiguousarray(msg.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def deserialize(data: bytes, float_bits: int = 64) -> QuantizedMessage:
    """Parse the FQL1 byte layout back into a message, validating as it goes."""
    if len(data) < HEADER_BYTES:
        raise CorruptMessageError("truncated header")
    magic, dim, batch, q, r_groups, n_cent, labels_flag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptMessageError(f"bad magic {magic!r}")
    if labels_flag not in (0, 1):
        raise CorruptMessageError(f"bad labels flag {labels_flag}")
    try:
        config = QuantizerConfig(q, r_groups, n_cent, float_bits)
        config.validate_dim(dim)
    except QuantizerConfigError as exc:
        raise CorruptMessageError(f"inconsistent header: {exc}") from exc
    if batch < 1:
        raise CorruptMessageError("batch must be >= 1")

    sub_dim = dim // q
    codebook_bytes = 8 * r_groups * n_cent * sub_dim
    width = config.index_width
    codeword_bytes = (batch * q * width + 7) // 8
    label_bytes = 4 * batch * labels_flag
    expected = HEADER_BYTES + codebook_bytes + codeword_bytes + label_bytes
    if len(data) != expected:
        raise CorruptMessageError(
            f"payload is {len(data)} bytes, layout requires {expected}"
        )

    pos = HEADER_BYTES
    codebook = np.frombuffer(data, dtype="<f8", count=r_groups * n_cent * sub_dim,
                             offset=pos).reshape(r_groups, n_cent, sub_dim).copy()
    pos += codebook_bytes
    indices = _unpack_indices(data[pos:pos + codeword_bytes], batch * q, width)
    if indices.size and indices.max() >= n_cent:
        raise CorruptMessageError("codeword index out of range")
    pos += codeword_bytes
    labels = None
    if labels_flag:
        labels = np.frombuffer(data, dtype="<u4", count=batch, offset=pos
                               ).astype(np.int64)
    msg = QuantizedMessage(dim, batch, config, codebook,
                           indices.reshape(batch, q), labels)
    msg.validate()
    return msg
