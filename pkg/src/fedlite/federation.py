"""Client populations and the datasets they hold.

Client weights are proportional to sample counts over the whole federation,
not over a round's selection; per-round renormalization happens in the
trainer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np


class DatasetFormatError(ValueError):
    """A data file or sample collection violates the expected layout."""


@dataclass
class DataSample:
    features: np.ndarray  # (dim,)
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 1:
            raise DatasetFormatError("features must be a flat vector")
        self.label = int(self.label)
        if self.label < 0:
            raise DatasetFormatError("labels are non-negative integers")


@dataclass
class ClientDataset:
    client_id: int
    samples: List[DataSample]

    @property
    def n(self) -> int:
        return len(self.samples)


@dataclass
class Federation:
    clients: List[ClientDataset]

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a federation needs at least one client")
        if any(c.n == 0 for c in self.clients):
            raise ValueError("every client needs at least one sample")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def weights(self) -> np.ndarray:
        """Sample-count weights over the full federation; they sum to one."""
        counts = np.array([c.n for c in self.clients], dtype=np.float64)
        w = counts / counts.sum()
        assert abs(w.sum() - 1.0) <= 1e-12
        return w

    def all_samples(self) -> List[DataSample]:
        out = []
        for c in self.clients:
            out.extend(c.samples)
        return out


def as_arrays(samples: Sequence[DataSample]):
    """Stack samples into the column-major (dim, n) layout plus labels."""
    if not samples:
        raise ValueError("cannot stack zero samples")
    x = np.stack([s.features for s in samples], axis=1)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def generate_synthetic(num_classes: int, input_dim: int, samples_per_class: int,
                       spread: float, noise: float, seed: int = 0) -> List[DataSample]:
    """Gaussian blobs, one per class, with means on a sphere of radius ``spread``.

    Each sample is its class mean plus isotropic noise.  Deterministic for a
    fixed seed, class-major sample order.
    """
    if num_classes < 1 or input_dim < 1 or samples_per_class < 1:
        raise ValueError("counts must be positive")
    if spread < 0 or noise < 0:
        raise ValueError("spread and noise must be non-negative")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, input_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = spread * directions / norms
    samples = []
    for label in range(num_classes):
        offsets = noise * rng.normal(size=(samples_per_class, input_dim))
        for k in range(samples_per_class):
            samples.append(DataSample(means[label] + offsets[k], label))
    return samples


def partition(dataset: Sequence[DataSample], num_clients: int, mode: str = "iid",
              shards_per_client: int = 1, seed: int = 0) -> Federation:
    """Split a dataset across clients.

    ``iid``: a seeded shuffle dealt out as evenly as possible (the first
    ``len % num_clients`` clients get one extra sample).  ``label-shard``:
    samples are stably sorted by label, cut into num_clients*shards_per_client
    contiguous shards, and each client draws ``shards_per_client`` shards from
    a seeded shuffle of the shard order; small values concentrate few labels
    per client.  Either way the union of client data is exactly the input.
    """
    dataset = list(dataset)
    n = len(dataset)
    if num_clients < 1:
        raise ValueError("need at least one client")
    if mode == "iid":
        if n < num_clients:
            raise ValueError(f"{n} samples cannot cover {num_clients} clients")
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
        base, extra = divmod(n, num_clients)
        clients = []
        pos = 0
        for cid in range(num_clients):
            take = base + (1 if cid < extra else 0)
            clients.append(ClientDataset(
                cid, [dataset[i] for i in order[pos:pos + take]]))
            pos += take
        return Federation(clients)
    if mode == "label-shard":
        if shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")
        n_shards = num_clients * shards_per_client
        if n_shards > n:
            raise ValueError(
                f"{n} samples cannot fill {n_shards} shards")
        labels = np.array([s.label for s in dataset])
        by_label = np.argsort(labels, kind="stable")
        shards = np.array_split(by_label, n_shards)
        rng = np.random.default_rng(seed)
        shard_order = rng.permutation(n_shards)
        clients = []
        for cid in range(num_clients):
            mine = shard_order[cid * shards_per_client:(cid + 1) * shards_per_client]
            idx = np.concatenate([shards[s] for s in mine])
            clients.append(ClientDataset(cid, [dataset[i] for i in idx]))
        return Federation(clients)
    raise ValueError(f"unknown partition mode {mode!r}")


# ---------------------------------------------------------------------------
# CSV ingestion


def load_csv(path, label_col: Union[int, str, None] = None,
             num_classes: Optional[int] = None) -> List[DataSample]:
    """Read samples from a headed CSV file.

    Features are decimal floats; the label column (by default the last one,
    selectable by name or index) holds non-negative integers, bounded by
    ``num_classes`` when given.  Malformed rows report their line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DatasetFormatError(f"{path}: need at least one feature column")
        if label_col is None:
            label_idx = len(header) - 1
        elif isinstance(label_col, str):
            if label_col not in header:
                raise DatasetFormatError(f"{path}: no column named {label_col!r}")
            label_idx = header.index(label_col)
        else:
            label_idx = int(label_col)
            if not 0 <= label_idx < len(header):
                raise DatasetFormatError(f"{path}: label column {label_idx} "
                                         f"outside 0..{len(header) - 1}")
        samples = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                label = int(row[label_idx])
                feats = [float(v) for i, v in enumerate(row) if i != label_idx]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{line_no}: {exc}") from None
            if label < 0:
                raise DatasetFormatError(f"{path}:{line_no}: negative label {label}")
            if num_classes is not None and label >= num_classes:
                raise DatasetFormatError(
                    f"{path}:{line_no}: label {label} outside [0, {num_classes})")
            samples.append(DataSample(np.array(feats), label))
    if not samples:
        raise DatasetFormatError(f"{path}: no data rows")
    return samples


def save_csv(samples: Sequence[DataSample], path) -> None:
    """Write samples in the layout load_csv reads back exactly."""
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to write")
    dim = samples[0].features.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label"])
        for s in samples:
            if s.features.shape[0] != dim:
                raise DatasetFormatError("inconsistent feature dimensions")
            writer.writerow([repr(float(v)) for v in s.features] + [s.label])
