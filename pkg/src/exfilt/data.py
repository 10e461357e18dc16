"""Schemas, datasets, splits, CSV I/O and the synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, SchemaError

BINARY = "binary"
CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class FeatureDomain:
    """One feature's range R_j.

    Binary is {0, 1}; categorical is {0, ..., hi}; continuous is [lo, hi].
    """

    kind: str = BINARY
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in (BINARY, CATEGORICAL, CONTINUOUS):
            raise SchemaError(f"unknown feature kind {self.kind!r}")
        if self.kind == BINARY and (self.lo, self.hi) != (0.0, 1.0):
            raise SchemaError("binary domain is fixed to {0, 1}")
        if self.kind == CATEGORICAL and (self.lo != 0 or self.hi < 1 or self.hi != int(self.hi)):
            raise SchemaError(f"categorical domain needs integer j_max >= 1, got {self.hi}")
        if self.lo > self.hi:
            raise SchemaError(f"j_min {self.lo} > j_max {self.hi}")

    @property
    def discrete(self) -> bool:
        return self.kind != CONTINUOUS

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class DatasetSchema:
    n_features: int
    n_classes: int
    feature_domains: tuple = ()

    def __post_init__(self):
        if self.n_features < 1 or self.n_classes < 1:
            raise SchemaError("n_features and n_classes must be positive")
        if not self.feature_domains:
            object.__setattr__(self, "feature_domains", (FeatureDomain(),) * self.n_features)
        else:
            object.__setattr__(self, "feature_domains", tuple(self.feature_domains))
        if len(self.feature_domains) != self.n_features:
            raise SchemaError(
                f"{len(self.feature_domains)} feature domains for {self.n_features} features")

    @classmethod
    def binary(cls, n_features: int, n_classes: int) -> "DatasetSchema":
        return cls(n_features, n_classes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([d.lo for d in self.feature_domains], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([d.hi for d in self.feature_domains], dtype=np.float64)

    @property
    def discrete_mask(self) -> np.ndarray:
        return np.array([d.discrete for d in self.feature_domains])

    @property
    def is_binary(self) -> bool:
        return all(d.kind == BINARY for d in self.feature_domains)

    def contains(self, X) -> np.ndarray:
        """Boolean matrix: which entries of ``X`` lie in their R_j."""
        X = np.asarray(X, dtype=np.float64)
        ok = (X >= self.lower) & (X <= self.upper)
        disc = self.discrete_mask
        ok[:, disc] &= X[:, disc] == np.round(X[:, disc])
        return ok

    def to_dict(self):
        doms = self.feature_domains
        if self.is_binary:
            return {"n_features": self.n_features, "n_classes": self.n_classes, "domains": "binary"}
        return {"n_features": self.n_features, "n_classes": self.n_classes,
                "domains": [d.to_dict() for d in doms]}

    @classmethod
    def from_dict(cls, d) -> "DatasetSchema":
        doms = d.get("domains", "binary")
        if doms == "binary":
            return cls.binary(int(d["n_features"]), int(d["n_classes"]))
        return cls(int(d["n_features"]), int(d["n_classes"]),
                   tuple(FeatureDomain(**x) for x in doms))


def clamp_to_domain(sample, schema: DatasetSchema) -> np.ndarray:
    """Project each feature into R_j (discrete features are rounded first)."""
    X = np.array(sample, dtype=np.float64, copy=True)
    disc = schema.discrete_mask
    X[..., disc] = np.round(X[..., disc])
    return np.clip(X, schema.lower, schema.upper)


@dataclass
class TabularDataset:
    samples: np.ndarray
    labels: np.ndarray
    schema: DatasetSchema
    membership: Optional[np.ndarray] = None
    # Row indices into whatever this was split from; bookkeeping only.
    source_index: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, self.schema.n_features)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.samples):
            raise SchemaError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.membership is not None:
            self.membership = np.asarray(self.membership, dtype=np.int64).reshape(-1)
            if len(self.membership) != len(self.samples):
                raise SchemaError("membership flags must match the number of samples")

    def __len__(self):
        return len(self.samples)

    def validate(self) -> "TabularDataset":
        if len(self) == 0:
            return self
        bad = ~self.schema.contains(self.samples)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise SchemaError(f"row {r}, column {c}: value {self.samples[r, c]} outside its domain")
        if self.labels.min() < 0 or self.labels.max() >= self.schema.n_classes:
            r = int(np.argmax((self.labels < 0) | (self.labels >= self.schema.n_classes)))
            raise SchemaError(f"row {r}: label {self.labels[r]} outside 0..{self.schema.n_classes - 1}")
        return self

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.source_index is None else self.source_index[idx]
        mem = None if self.membership is None else self.membership[idx]
        return TabularDataset(self.samples[idx], self.labels[idx], self.schema, mem, src)

    @classmethod
    def empty(cls, schema: DatasetSchema) -> "TabularDataset":
        return cls(np.zeros((0, schema.n_features)), np.zeros(0, dtype=np.int64), schema,
                   source_index=np.zeros(0, dtype=np.int64))


def fingerprint(row) -> bytes:
    """Stable hash of a feature vector, used for duplicate detection."""
    return hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=16).digest()


def fingerprints(X) -> list:
    return [fingerprint(r) for r in np.asarray(X, dtype=np.float64)]


def load_csv(path, schema: DatasetSchema) -> TabularDataset:
    """Read ``f0,...,f{n-1},label[,member]`` rows; errors carry 1-based line numbers."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        n = schema.n_features
        expected = [f"f{i}" for i in range(n)] + ["label"]
        has_member = len(header) == n + 2 and header[-1] == "member"
        if header[: n + 1] != expected or len(header) not in (n + 1, n + 2) or (
                len(header) == n + 2 and not has_member):
            raise SchemaError(f"{path}: header must be f0..f{n - 1},label[,member]")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise SchemaError(f"{path}:{line_no}: {exc}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    labels = arr[:, n]
    if np.any(labels != np.round(labels)):
        r = int(np.argmax(labels != np.round(labels)))
        raise SchemaError(f"{path}:{r + 2}: label {labels[r]} is not an integer")
    member = arr[:, n + 1].astype(np.int64) if has_member else None
    ds = TabularDataset(arr[:, :n], labels.astype(np.int64), schema, member)
    try:
        ds.validate()
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return ds


def write_csv(dataset: TabularDataset, path) -> None:
    n = dataset.schema.n_features
    header = [f"f{i}" for i in range(n)] + ["label"]
    if dataset.membership is not None:
        header.append("member")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(dataset)):
            # repr() round-trips float64 exactly.
            row = [repr(float(v)) if v != int(v) else str(int(v)) for v in dataset.samples[i]]
            row.append(str(int(dataset.labels[i])))
            if dataset.membership is not None:
                row.append(str(int(dataset.membership[i])))
            w.writerow(row)


@dataclass
class SplitSpec:
    """Sizes of D_M, D_A, D_N and the member/non-member halves of D_mem."""

    train_size: int = 0
    aux_size: int = 0
    neutral_size: int = 0
    mem_members: int = 0
    mem_nonmembers: int = 0
    seed: int = 0


@dataclass
class Splits:
    d_m: TabularDataset
    d_a: TabularDataset
    d_n: TabularDataset
    d_mem: TabularDataset


def split(dataset: TabularDataset, spec: SplitSpec) -> Splits:
    """Disjoint random split.

    D_M, D_A, D_N and the D_mem non-members come from disjoint slices of one
    permutation; D_mem members are a random subset of D_M.
    """
    sizes = (spec.train_size, spec.aux_size, spec.neutral_size, spec.mem_members, spec.mem_nonmembers)
    if any(s < 0 for s in sizes):
        raise ConfigError("split sizes must be non-negative")
    outside = spec.train_size + spec.aux_size + spec.neutral_size + spec.mem_nonmembers
    if outside > len(dataset):
        raise ConfigError(f"split needs {outside} rows, dataset has {len(dataset)}")
    if spec.mem_members > spec.train_size:
        raise ConfigError(f"cannot draw {spec.mem_members} members from {spec.train_size} training rows")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(dataset))
    cuts = np.cumsum([0, spec.train_size, spec.aux_size, spec.neutral_size, spec.mem_nonmembers])
    m_idx, a_idx, n_idx, out_idx = (perm[cuts[i]:cuts[i + 1]] for i in range(4))
    in_idx = m_idx[rng.permutation(len(m_idx))[: spec.mem_members]]
    mem_idx = np.concatenate([in_idx, out_idx]).astype(np.int64)
    d_mem = dataset.subset(mem_idx)
    d_mem.membership = np.concatenate([np.ones(len(in_idx)), np.zeros(len(out_idx))]).astype(np.int64)
    return Splits(dataset.subset(m_idx), dataset.subset(a_idx), dataset.subset(n_idx), d_mem)


def synth_generate(schema: DatasetSchema, n_rows: int, class_sep: float, seed: int) -> TabularDataset:
    """Prototype-plus-bitflip classes.

    Each class gets a random prototype bit vector; every row copies its
    class prototype and flips each bit independently with probability
    ``(1 - class_sep) / 2``.  Classes are balanced to within one row.
    """
    if not schema.is_binary:
        raise ConfigError("synthetic generator needs an all-binary schema")
    if not 0.0 <= class_sep <= 1.0:
        raise ConfigError(f"class_sep must lie in [0, 1], got {class_sep}")
    if n_rows < schema.n_classes:
        raise ConfigError(f"need at least {schema.n_classes} rows to balance classes, got {n_rows}")
    rng = np.random.default_rng(seed)
    protos = rng.integers(0, 2, size=(schema.n_classes, schema.n_features))
    labels = rng.permutation(np.arange(n_rows) % schema.n_classes)
    flips = rng.random((n_rows, schema.n_features)) < (1.0 - class_sep) / 2.0
    X = np.bitwise_xor(protos[labels], flips.astype(protos.dtype)).astype(np.float64)
    return TabularDataset(X, labels, schema)


def estimate_rho(samples) -> float:
    """Data-driven flip rate: std of the activation indicator ``x > 0``.

    Returns the standard deviation over all entries of the indicator
    ``x > 0``, which for 0/1 data is ``sqrt(p(1-p))`` with ``p`` the overall
    activation rate.
    """
    return float(np.std(np.asarray(samples) > 0))


def write_manifest(path, schema: DatasetSchema, source: str, spec: SplitSpec, extra=None) -> None:
    doc = {"schema": schema.to_dict(), "source": source, "split": vars(spec)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["schema"] = DatasetSchema.from_dict(doc["schema"])
    doc["split"] = SplitSpec(**doc["split"])
    return doc


def concat(parts: Sequence[TabularDataset], schema: DatasetSchema) -> TabularDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        return TabularDataset.empty(schema)
    return TabularDataset(np.vstack([p.samples for p in parts]),
                          np.concatenate([p.labels for p in parts]), schema)
