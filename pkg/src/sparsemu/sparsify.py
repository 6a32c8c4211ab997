"""Binary weight masks: one-shot magnitude (OMP), SynFlow, random, IMP.

Only *prunable* coordinates are ever zeroed. Biases are always kept, and for
networks with hidden layers the classifier layer is kept too unless
``prune_all`` is set. A single-layer model has no other layer to prune, so
its weight matrix is always prunable.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from ._container import read_container, write_container
from .nnet import Dataset, ModelSpec, TrainConfig

METHODS = ("OMP", "SynFlow", "Random", "IMP", "Dense")


@dataclass(frozen=True)
class SparsityMask:
    bits: np.ndarray
    sparsity: float
    method: str
    seed: int | None = None

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")

    def __len__(self) -> int:
        return self.bits.size

    @property
    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    @property
    def n_pruned(self) -> int:
        return int((~self.bits).sum())

    def density(self, spec: ModelSpec, prune_all: bool = False) -> float:
        p = prunable(spec, prune_all)
        return float(self.bits[p].sum()) / max(1, int(p.sum()))


def prunable(spec: ModelSpec, prune_all: bool = False) -> np.ndarray:
    m = np.zeros(spec.param_count, dtype=bool)
    layout = spec.layout()
    for li, (ws, _) in enumerate(layout):
        if li == len(layout) - 1 and len(layout) > 1 and not prune_all:
            continue
        m[ws] = True
    return m


def n_to_prune(s: float, n_weights: int) -> int:
    """floor(s * W), guarded against products like 0.29 * 100 = 28.999..."""
    return int(math.floor(s * n_weights + 1e-9))


def dense_mask(spec: ModelSpec) -> SparsityMask:
    return SparsityMask(np.ones(spec.param_count, bool), 0.0, "Dense")


def _check_s(s: float) -> None:
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")


def _keep_top(scores: np.ndarray, candidates: np.ndarray, k_prune: int, total: int) -> np.ndarray:
    """Zero the ``k_prune`` lowest-scored candidates; ties prune lower index first."""
    bits = np.ones(total, dtype=bool)
    cand = np.flatnonzero(candidates)
    order = np.argsort(scores[cand], kind="stable")
    bits[cand[order[:k_prune]]] = False
    return bits


def apply_mask(theta, mask: SparsityMask | np.ndarray) -> np.ndarray:
    bits = mask.bits if isinstance(mask, SparsityMask) else np.asarray(mask, bool)
    theta = np.asarray(theta, dtype=np.float64)
    if bits.shape != theta.shape:
        raise nnet.ShapeError("mask length does not match parameter vector")
    return np.where(bits, theta, 0.0)


def omp(spec: ModelSpec, theta, s: float, prune_all: bool = False) -> SparsityMask:
    """Global unstructured magnitude pruning of the prunable weights."""
    _check_s(s)
    theta = nnet.check_weights(spec, theta)
    cand = prunable(spec, prune_all)
    bits = _keep_top(np.abs(theta), cand, n_to_prune(s, int(cand.sum())), spec.param_count)
    return SparsityMask(bits, s, "OMP")


def synflow_scores(spec: ModelSpec, theta_abs: np.ndarray) -> np.ndarray:
    """|theta * dR/dtheta| with R the summed output on an all-ones input."""
    X = np.ones((1, spec.input_dim))
    layers = nnet._unpack(spec, theta_abs)
    acts, pre = nnet._forward(spec, layers, X)
    dR = np.ones((1, spec.n_classes))
    grad = nnet._backward(spec, layers, acts, pre, dR)
    scores = np.abs(theta_abs * grad)
    if not np.all(np.isfinite(scores)):
        raise nnet.NumericError("non-finite synaptic-flow scores")
    return scores


def synflow(spec: ModelSpec, theta_init, s: float, rounds: int = 100,
            prune_all: bool = False) -> SparsityMask:
    """Iterative data-free pruning; density follows (1-s)^(r/rounds)."""
    _check_s(s)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    theta_abs = np.abs(nnet.check_weights(spec, theta_init))
    cand = prunable(spec, prune_all)
    W = int(cand.sum())
    bits = np.ones(spec.param_count, dtype=bool)
    if s == 0.0:
        return SparsityMask(bits, s, "SynFlow")
    for r in range(1, rounds + 1):
        if r == rounds:
            k = n_to_prune(s, W)
        else:
            k = n_to_prune(1.0 - (1.0 - s) ** (r / rounds), W)
        scores = synflow_scores(spec, theta_abs * bits)
        bits = _keep_top(scores, cand, k, spec.param_count)
    return SparsityMask(bits, s, "SynFlow")


def random_mask(spec: ModelSpec, s: float, seed: int, prune_all: bool = False) -> SparsityMask:
    _check_s(s)
    cand = np.flatnonzero(prunable(spec, prune_all))
    rng = np.random.default_rng(seed)
    bits = np.ones(spec.param_count, dtype=bool)
    k = n_to_prune(s, cand.size)
    if k:
        bits[rng.choice(cand, size=k, replace=False)] = False
    return SparsityMask(bits, s, "Random", seed)


def imp(spec: ModelSpec, data: Dataset, s: float, prune_rounds: int, cfg: TrainConfig,
        init=None, prune_all: bool = False, rate: float = 0.2) -> SparsityMask:
    """Train, prune ``rate`` of the survivors by magnitude, rewind; repeat.

    The rewind point is the weight vector after 10% of the training steps.
    """
    _check_s(s)
    if prune_rounds < 1:
        raise ValueError("prune_rounds must be >= 1")
    if (1.0 - rate) ** prune_rounds > 1.0 - s + 1e-12:
        raise ValueError(f"{prune_rounds} rounds at rate {rate} cannot reach sparsity {s}")
    bits = np.ones(spec.param_count, dtype=bool)
    if s == 0.0:
        return SparsityMask(bits, s, "IMP", cfg.seed)
    cand = prunable(spec, prune_all)
    W = int(cand.sum())
    theta0 = nnet.init_params(spec, cfg.seed) if init is None else nnet.check_weights(spec, init)
    sched = nnet.batch_schedule(len(data), cfg)
    n_rewind = max(1, len(sched) // 10)
    rewind = nnet.sgd(spec, theta0, data, cfg, bits, batches=sched[:n_rewind]).theta
    start = rewind
    for _ in range(prune_rounds):
        if W - int(bits[cand].sum()) >= n_to_prune(s, W):
            break
        trained = nnet.sgd(spec, start, data, cfg, bits.astype(float), batches=sched[n_rewind:]).theta
        alive = cand & bits
        k = int(math.floor(rate * int(alive.sum())))
        order = np.argsort(np.abs(trained[alive]), kind="stable")
        idx = np.flatnonzero(alive)[order[:k]]
        bits = bits.copy()
        bits[idx] = False
        start = np.where(bits, rewind, 0.0)
    return SparsityMask(bits, s, "IMP", cfg.seed)


# ---------------------------------------------------------------- serialization


def model_hash(spec: ModelSpec) -> str:
    import json

    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def encode_runs(bits: np.ndarray) -> tuple[int, np.ndarray]:
    bits = np.asarray(bits, dtype=bool)
    if bits.size == 0:
        return 1, np.zeros(0, dtype="<u4")
    change = np.flatnonzero(bits[1:] != bits[:-1]) + 1
    edges = np.concatenate([[0], change, [bits.size]])
    return int(bits[0]), np.diff(edges).astype("<u4")


def decode_runs(first: int, runs: np.ndarray) -> np.ndarray:
    vals = (np.arange(runs.size) % 2 == 0) == bool(first)
    return np.repeat(vals, runs.astype(np.int64))


def save_mask(path, mask: SparsityMask, spec: ModelSpec) -> None:
    first, runs = encode_runs(mask.bits)
    header = {"method": mask.method, "sparsity": mask.sparsity, "seed": mask.seed,
              "model_hash": model_hash(spec), "length": int(mask.bits.size),
              "first": first, "n_runs": int(runs.size)}
    write_container(path, header, runs)


def load_mask(path, spec: ModelSpec | None = None) -> SparsityMask:
    header, runs = read_container(path, "<u4")
    if spec is not None and header["model_hash"] != model_hash(spec):
        raise ValueError("mask was produced for a different model")
    bits = decode_runs(header["first"], runs)
    if bits.size != header["length"]:
        raise ValueError("corrupt mask file")
    return SparsityMask(bits, header["sparsity"], header["method"], header["seed"])
