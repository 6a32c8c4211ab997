"""Synthetic data and forgetting scenarios (class-wise, random, backdoor)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from ._container import read_container, write_container
from .nnet import Dataset, ModelSpec

SCENARIOS = ("class-wise", "random", "backdoor")


class DegenerateSplit(ValueError):
    pass


@dataclass(frozen=True)
class ForgetSplit:
    forget: np.ndarray
    remain: np.ndarray
    scenario: str
    forget_class: int | None = None
    poison_ratio: float | None = None

    def __post_init__(self):
        f = np.sort(np.asarray(self.forget, dtype=np.int64))
        r = np.sort(np.asarray(self.remain, dtype=np.int64))
        object.__setattr__(self, "forget", f)
        object.__setattr__(self, "remain", r)
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if r.size == 0:
            raise DegenerateSplit("remaining set is empty")
        if np.intersect1d(f, r).size:
            raise DegenerateSplit("forget and remain sets overlap")
        n = f.size + r.size
        if not np.array_equal(np.sort(np.concatenate([f, r])), np.arange(n)):
            raise DegenerateSplit("forget and remain sets do not cover the index range")

    @property
    def n(self) -> int:
        return self.forget.size + self.remain.size

    def forget_set(self, data: Dataset) -> Dataset:
        return data.subset(self.forget)

    def remain_set(self, data: Dataset) -> Dataset:
        return data.subset(self.remain)


def split_from_forget(n: int, forget, scenario: str = "random", **kw) -> ForgetSplit:
    """Build a split from forget indices alone; ``forget`` may be empty."""
    forget = np.unique(np.asarray(forget, dtype=np.int64))
    remain = np.setdiff1d(np.arange(n), forget)
    return ForgetSplit(forget, remain, scenario, **kw)


# ------------------------------------------------------------------------ blobs


def blob_centroids(classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Class centres at pairwise distance ``separation`` when classes <= dim."""
    rng = np.random.default_rng([seed, 0])
    if classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, classes)))
        return (separation / math.sqrt(2.0)) * q.T
    u = rng.normal(size=(classes, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return (separation / math.sqrt(2.0)) * u


def make_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int,
               test_per_class: int | None = None, noise: float = 1.0) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters; returns (train, test)."""
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if classes < 2 or dim < 1:
        raise ValueError("need >= 2 classes and dim >= 1")
    test_per_class = per_class if test_per_class is None else test_per_class
    C = blob_centroids(classes, dim, separation, seed)
    rng = np.random.default_rng([seed, 1])

    def draw(k):
        y = np.repeat(np.arange(classes), k)
        X = C[y] + noise * rng.normal(size=(y.size, dim))
        order = rng.permutation(y.size)
        return Dataset(X[order], y[order])

    train = draw(per_class)
    test = draw(test_per_class) if test_per_class > 0 else None
    return train, test


# -------------------------------------------------------------------- splitting


def class_wise_split(data: Dataset, class_id: int) -> ForgetSplit:
    labels = np.asarray(data.y, dtype=np.int64)
    forget = np.flatnonzero(labels == class_id)
    if forget.size == 0:
        raise DegenerateSplit(f"class {class_id} is absent from the data")
    remain = np.flatnonzero(labels != class_id)
    return ForgetSplit(forget, remain, "class-wise", forget_class=int(class_id))


def random_split(data: Dataset, fraction: float, seed: int) -> ForgetSplit:
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(data)
    k = int(math.floor(fraction * n + 1e-9))
    if k == 0 or k == n:
        raise DegenerateSplit(f"fraction {fraction} of {n} leaves one side empty")
    rng = np.random.default_rng(seed)
    forget = rng.choice(n, size=k, replace=False)
    return ForgetSplit(forget, np.setdiff1d(np.arange(n), forget), "random")


# --------------------------------------------------------------------- backdoor


@dataclass(frozen=True)
class BackdoorSpec:
    """Additive offset ``magnitude`` on the last ceil(dim/10) features."""

    target: int
    ratio: float
    magnitude: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("poison ratio must lie in (0, 1)")

    def trigger(self, dim: int) -> np.ndarray:
        t = np.zeros(dim)
        t[dim - math.ceil(dim / 10) :] = self.magnitude
        return t

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) + self.trigger(X.shape[1])[None, :]


def poison(data: Dataset, spec: BackdoorSpec, seed: int) -> tuple[Dataset, ForgetSplit]:
    n = len(data)
    k = int(math.floor(spec.ratio * n + 1e-9))
    if k < 1:
        raise DegenerateSplit("poison ratio selects no examples")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    X = data.X.copy()
    y = data.y.copy()
    X[idx] += spec.trigger(data.dim)
    y[idx] = spec.target
    split = ForgetSplit(idx, np.setdiff1d(np.arange(n), idx), "backdoor", poison_ratio=spec.ratio)
    return Dataset(X, y), split


def asr(model: ModelSpec, theta, clean_test: Dataset, spec: BackdoorSpec) -> float:
    """Percentage of triggered non-target test points classified as the target."""
    if not 0 <= spec.target < model.n_classes:
        raise ValueError("backdoor target is not a valid class")
    keep = np.asarray(clean_test.y, dtype=np.int64) != spec.target
    if not keep.any():
        raise DegenerateSplit("every test point already has the target label")
    pred = nnet.predict(model, theta, spec.apply(clean_test.X[keep]))
    return 100.0 * float(np.mean(pred == spec.target))


def standard_accuracy(model: ModelSpec, theta, clean_test: Dataset) -> float:
    from .evalkit import accuracy

    return accuracy(model, theta, clean_test)


# ------------------------------------------------------------------------- I/O


def save_dataset(path, data: Dataset, meta: dict | None = None) -> None:
    n, d = data.X.shape
    header = {"n": n, "dim": d, "label_dtype": str(np.asarray(data.y).dtype),
              "layout": "features(n*d), labels(n), weights(n)", "meta": meta or {}}
    payload = np.concatenate([data.X.ravel(), np.asarray(data.y, dtype=np.float64), data.weights])
    write_container(path, header, payload)


def load_dataset(path) -> Dataset:
    header, p = read_container(path, "<f8")
    n, d = header["n"], header["dim"]
    if p.size != n * d + 2 * n:
        raise ValueError("corrupt dataset file")
    y = p[n * d : n * d + n]
    if header["label_dtype"].startswith("int"):
        y = y.astype(np.int64)
    return Dataset(p[: n * d].reshape(n, d), y, p[n * d + n :])


def load_csv(path, label_column: str = "label") -> Dataset:
    """Numeric feature columns plus one integer label column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    head = [h.strip() for h in rows[0]]
    if label_column not in head:
        raise ValueError(f"{path}: missing label column {label_column!r}")
    li = head.index(label_column)
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    X = np.delete(body, li, axis=1)
    y = body[:, li]
    if np.all(np.equal(np.mod(y, 1), 0)):
        y = y.astype(np.int64)
    return Dataset(X, y)
