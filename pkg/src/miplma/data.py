"""MIPL datasets: bag containers, JSONL I/O, synthetic generation and splits."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, ParseError, SchemaError


@dataclass(frozen=True)
class DatasetMeta:
    d: int
    k: int
    name: str = "dataset"

    def __post_init__(self):
        if self.d < 1:
            raise SchemaError(f"feature dimension d must be >= 1, got {self.d}")
        if self.k < 2:
            raise SchemaError(f"number of classes k must be >= 2, got {self.k}")


@dataclass(frozen=True, eq=False)
class Bag:
    """One multi-instance sample.

    ``instances`` is ``n_i x d``; ``candidates`` is a sorted tuple of 0-based
    class indices.  ``positive`` optionally flags which instances were drawn
    from the true-label cluster (generator metadata, used by attention dumps).
    """

    id: str
    instances: np.ndarray
    candidates: tuple
    true_label: Optional[int] = None
    positive: Optional[tuple] = None

    def __post_init__(self):
        x = np.asarray(self.instances, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise SchemaError(f"bag {self.id}: instances must be a non-empty n x d matrix")
        x.setflags(write=False)
        object.__setattr__(self, "instances", x)
        cands = tuple(sorted({int(c) for c in self.candidates}))
        if not cands:
            raise SchemaError(f"bag {self.id}: empty candidate set")
        object.__setattr__(self, "candidates", cands)
        if self.true_label is not None:
            object.__setattr__(self, "true_label", int(self.true_label))
        if self.positive is not None:
            flags = tuple(bool(p) for p in self.positive)
            if len(flags) != x.shape[0]:
                raise SchemaError(f"bag {self.id}: {len(flags)} instance flags for {x.shape[0]} instances")
            object.__setattr__(self, "positive", flags)

    @property
    def n(self):
        return self.instances.shape[0]

    def non_candidates(self, k):
        cands = set(self.candidates)
        return tuple(c for c in range(k) if c not in cands)

    def permuted(self, order):
        """The same bag with instances reordered by ``order``."""
        order = np.asarray(order)
        flags = None if self.positive is None else tuple(self.positive[i] for i in order)
        return Bag(self.id, self.instances[order], self.candidates, self.true_label, flags)

    def with_candidates(self, candidates):
        return Bag(self.id, self.instances, candidates, self.true_label, self.positive)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.id == other.id and self.candidates == other.candidates
                and self.true_label == other.true_label and self.positive == other.positive
                and self.instances.shape == other.instances.shape
                and bool(np.array_equal(self.instances, other.instances)))

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    meta: DatasetMeta
    bags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        seen = set()
        for bag in self.bags:
            if bag.instances.shape[1] != self.meta.d:
                raise SchemaError(
                    f"bag {bag.id}: instance width {bag.instances.shape[1]} != d={self.meta.d}")
            if bag.candidates[0] < 0 or bag.candidates[-1] >= self.meta.k:
                raise SchemaError(f"bag {bag.id}: candidate index outside [0, {self.meta.k})")
            if bag.true_label is not None and not 0 <= bag.true_label < self.meta.k:
                raise SchemaError(f"bag {bag.id}: true_label {bag.true_label} outside [0, {self.meta.k})")
            if bag.id in seen:
                raise SchemaError(f"duplicate bag id {bag.id!r}")
            seen.add(bag.id)

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def subset(self, indices, name=None):
        meta = self.meta if name is None else DatasetMeta(self.meta.d, self.meta.k, name)
        return Dataset(meta, tuple(self.bags[i] for i in indices))

    def replace_bags(self, bags):
        return Dataset(self.meta, tuple(bags))


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class GenConfig:
    m: int = 500
    k: int = 5
    d: int = 10
    n_range: tuple = (5, 15)
    r: Optional[int] = 1
    q: Optional[float] = None
    pos_fraction_range: tuple = (0.2, 0.6)
    cluster_sep: float = 3.0
    seed: int = 0
    name: str = "synthetic"

    def validate(self):
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if self.k < 2 or self.d < 1:
            raise ConfigurationError(f"need k >= 2 and d >= 1, got k={self.k}, d={self.d}")
        if self.d < self.k:
            raise ConfigurationError(
                f"equidistant placement of {self.k} label centers plus a background "
                f"center needs d >= k, got d={self.d}, k={self.k}")
        n_min, n_max = self.n_range
        if n_min < 1 or n_max < n_min:
            raise ConfigurationError(f"invalid n_range {self.n_range}")
        if (self.r is None) == (self.q is None):
            raise ConfigurationError("exactly one of r (false-positive count) and q (flip probability) must be set")
        if self.r is not None and not 0 <= self.r <= self.k - 1:
            raise ConfigurationError(f"r must lie in [0, k-1] = [0, {self.k - 1}], got {self.r}")
        if self.q is not None and not 0 <= self.q < 1:
            raise ConfigurationError(f"q must lie in [0, 1), got {self.q}")
        lo, hi = self.pos_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"pos_fraction_range must lie in (0, 1], got {self.pos_fraction_range}")
        if self.cluster_sep < 0:
            raise ConfigurationError("cluster_sep must be non-negative")


def cluster_centers(k, d, sep, rng):
    """k label centers plus one background center (last row), pairwise ``sep * sqrt(d)`` apart."""
    dist = sep * np.sqrt(d)
    simplex = np.eye(k + 1) * (dist / np.sqrt(2.0))
    simplex -= simplex.mean(axis=0)
    # orthonormal basis of the k-dim subspace orthogonal to the all-ones vector
    basis = np.linalg.qr(np.hstack([np.ones((k + 1, 1)), np.eye(k + 1)[:, :k]]))[0][:, 1:]
    coords = simplex @ basis
    rot = np.linalg.qr(rng.standard_normal((d, d)))[0][:, :k]
    return coords @ rot.T


def generate(cfg: GenConfig) -> Dataset:
    cfg.validate()
    centers = cluster_centers(cfg.k, cfg.d, cfg.cluster_sep, np.random.default_rng([cfg.seed, 0xC0FFEE]))
    background = centers[cfg.k]
    lo, hi = cfg.pos_fraction_range
    n_min, n_max = cfg.n_range
    bags = []
    for i in range(cfg.m):
        rng = np.random.default_rng([cfg.seed, i])
        label = int(rng.integers(cfg.k))
        n = int(rng.integers(n_min, n_max + 1))
        n_pos = min(n, max(1, int(round(rng.uniform(lo, hi) * n))))
        flags = np.zeros(n, dtype=bool)
        flags[:n_pos] = True
        rng.shuffle(flags)
        means = np.where(flags[:, None], centers[label], background)
        x = means + rng.standard_normal((n, cfg.d))
        others = np.array([c for c in range(cfg.k) if c != label])
        if cfg.r is not None:
            extra = rng.choice(others, size=cfg.r, replace=False) if cfg.r else []
        else:
            extra = others[rng.random(others.size) < cfg.q]
        bags.append(Bag(f"{cfg.name}-{i:05d}", x, [label, *extra], label, tuple(flags)))
    return Dataset(DatasetMeta(cfg.d, cfg.k, cfg.name), tuple(bags))


# ---------------------------------------------------------------------------
# degradation strategies


def mean_degrade(bag):
    return np.asarray(bag.instances if isinstance(bag, Bag) else bag).mean(axis=0)


def maxmin_degrade(bag):
    x = np.asarray(bag.instances if isinstance(bag, Bag) else bag)
    return np.concatenate([x.max(axis=0), x.min(axis=0)])


class MeanDegrader(TransformerMixin, BaseEstimator):
    """Collapse each bag to the per-dimension mean of its instances."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([mean_degrade(b) for b in X])


class MaxMinDegrader(TransformerMixin, BaseEstimator):
    """Collapse each bag to ``[max per dimension || min per dimension]``."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([maxmin_degrade(b) for b in X])


# ---------------------------------------------------------------------------
# splitting


def split(ds: Dataset, ratio: float = 0.7, seed: int = 0):
    if not 0 < ratio < 1:
        raise ConfigurationError(f"split ratio must lie in (0, 1), got {ratio}")
    m = len(ds)
    n_train = int(round(ratio * m))
    if n_train == 0 or n_train == m:
        raise ConfigurationError(f"ratio {ratio} on {m} bags leaves an empty partition")
    order = np.random.default_rng(seed).permutation(m)
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])


# ---------------------------------------------------------------------------
# JSONL


def bag_to_record(bag):
    rec = {
        "id": bag.id,
        "instances": bag.instances.tolist(),
        "candidates": list(bag.candidates),
        "true_label": bag.true_label,
    }
    if bag.positive is not None:
        rec["positive"] = list(bag.positive)
    return rec


def write_jsonl(ds: Dataset, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"d": ds.meta.d, "k": ds.meta.k, "name": ds.meta.name}) + "\n")
        for bag in ds.bags:
            fh.write(json.dumps(bag_to_record(bag)) + "\n")


def _bag_from_record(rec, meta, lineno):
    try:
        inst = rec["instances"]
        cands = rec["candidates"]
        bag_id = str(rec["id"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bag record missing field {exc}", lineno) from None
    widths = {len(row) for row in inst} if inst else {None}
    if widths != {meta.d}:
        raise SchemaError(f"line {lineno}: instance width {sorted(widths, key=str)} != d={meta.d}")
    bad = [c for c in cands if not 0 <= int(c) < meta.k]
    if bad:
        raise SchemaError(f"line {lineno}: candidate index {bad[0]} outside [0, {meta.k})")
    try:
        return Bag(bag_id, np.array(inst, dtype=np.float64), cands, rec.get("true_label"), rec.get("positive"))
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None


def read_jsonl(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, expected a meta header", 1)
    try:
        head = json.loads(lines[0])
        meta = DatasetMeta(int(head["d"]), int(head["k"]), str(head.get("name", path.stem)))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad meta header: {exc}", 1) from None
    bags = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), lineno) from None
        bags.append(_bag_from_record(rec, meta, lineno))
    return Dataset(meta, tuple(bags))
