"""Empirical check of the sparse SGD-unrolling unlearning-error bound.

Protocol for one scrubbed point ``z``: masked SGD from ``m * theta_0`` with
a recorded schedule; the GA estimate adds back ``lr/B * m * grad l(m*theta_0, z)``
for every step that sampled ``z`` (gradients anchored at the initial
weights); the reference retrains on the same schedule with ``z`` removed
from its batches. The measured error is the l2 distance between the two,
compared with ``lr^2/2 * (t-1) * ||m * (theta_t - theta_0)|| * sigma(m)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nnet, sparsify
from .nnet import Dataset, ModelSpec, TrainConfig, TrainTrace


class PowerIterationError(ArithmeticError):
    def __init__(self, msg: str, estimate: float):
        super().__init__(msg)
        self.estimate = estimate


def power_sigma(apply, n: int, tol: float = 1e-6, max_iter: int = 500, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric operator by power iteration.

    Stops when the eigen-residual ``||Av - lambda v||`` falls below
    ``tol * |lambda|``.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        Av = apply(v)
        lam = float(v @ Av)
        nrm = float(np.linalg.norm(Av))
        if nrm == 0.0:
            return 0.0
        if np.linalg.norm(Av - lam * v) <= tol * max(abs(lam), 1e-300):
            return abs(lam)
        v = Av / nrm
    raise PowerIterationError(f"power iteration did not converge in {max_iter} iterations",
                              abs(lam))


def sigma_from_hessian(H: np.ndarray, mask) -> float:
    """Spectral norm of the principal submatrix on unmasked coordinates."""
    keep = np.flatnonzero(np.asarray(mask).astype(bool))
    if keep.size == 0:
        return 0.0
    ev = np.linalg.eigvalsh(H[np.ix_(keep, keep)])
    return float(np.max(np.abs(ev)))


def sigma_of_mask(model: ModelSpec, theta, data: Dataset, mask, weight_decay: float = 0.0,
                  method: str = "auto", tol: float = 1e-6, max_iter: int = 500) -> float:
    """sigma(m): largest Hessian singular value over unmasked coordinates.

    Linear models use the exact Hessian and a dense eigensolve; MLPs (or
    ``method="power"``) iterate the projected HVP operator ``P H P``.
    """
    bits = mask.bits if isinstance(mask, sparsify.SparsityMask) else np.asarray(mask).astype(bool)
    if method == "auto":
        method = "dense" if model.kind == "linear" else "power"
    if method == "dense":
        return sigma_from_hessian(nnet.hessian(model, theta, data, weight_decay), bits)
    m = bits.astype(np.float64)

    def apply(v):
        return m * nnet.hvp(model, theta, data, m * v, weight_decay)

    return power_sigma(apply, model.param_count, tol, max_iter)


@dataclass
class BoundReport:
    measured_error: float
    bound_value: float
    sigma_m: float
    sparsity: float
    eta: float
    t: int
    seed: int
    occurrences: int = 0
    approx_residual: float = float("nan")

    def __post_init__(self):
        for name in ("measured_error", "bound_value", "sigma_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    @property
    def ratio(self) -> float:
        return self.measured_error / self.bound_value if self.bound_value > 0 else float("nan")


def bound_value(eta: float, t: int, theta_t, theta_0, mask, sigma: float) -> float:
    m = np.asarray(mask, dtype=np.float64)
    drift = float(np.linalg.norm(m * (np.asarray(theta_t) - np.asarray(theta_0))))
    return 0.5 * eta * eta * max(t - 1, 0) * drift * sigma


def _check_theory_cfg(cfg: TrainConfig) -> None:
    if cfg.momentum:
        raise ValueError("the unrolling analysis assumes plain SGD (momentum 0)")


def measure_unlearning_error(model: ModelSpec, data: Dataset, scrub_index: int, cfg: TrainConfig,
                             mask=None, init=None, trace: TrainTrace | None = None,
                             weight_decay: float | None = None) -> BoundReport:
    _check_theory_cfg(cfg)
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    P = model.param_count
    bits = np.ones(P, bool) if mask is None else (
        mask.bits if isinstance(mask, sparsify.SparsityMask) else np.asarray(mask).astype(bool))
    m = bits.astype(np.float64)
    if trace is None:
        theta0 = nnet.init_params(model, cfg.seed) if init is None else np.asarray(init, float)
        res = nnet.sgd(model, theta0, data, cfg.replace(record_trace=True), m)
        trace = res.trace
    if trace is None:
        raise ValueError("a recorded trace is required")
    th0 = trace.theta0  # already masked by sgd
    occ_coef = 0.0
    occurrences = 0
    for b in trace.batches:
        hits = int(np.count_nonzero(b == scrub_index))
        if hits:
            occurrences += hits
            occ_coef += hits / len(b)
    if occurrences == 0:
        theta_ga = trace.theta_t.copy()
    else:
        z = data.subset([scrub_index])
        g0 = nnet.gradient(model, th0, z, wd) * m
        theta_ga = trace.theta_t + trace.lr * occ_coef * g0
    theta_rt = nnet.sgd(model, th0, data, cfg.replace(record_trace=False), m,
                        batches=trace.batches, exclude=[scrub_index]).theta
    err = float(np.linalg.norm(theta_ga - theta_rt))
    sig = sigma_of_mask(model, th0, data, bits, wd)
    bnd = bound_value(trace.lr, trace.steps, trace.theta_t, th0, m, sig)
    resid = _drift_residual(model, data, trace, m, wd)
    s = 1.0 - float(bits[sparsify.prunable(model)].mean()) if mask is not None else 0.0
    return BoundReport(err, bnd, sig, s, trace.lr, trace.steps, cfg.seed, occurrences, resid)


def _drift_residual(model, data, trace, m, wd) -> float:
    """Worst relative error of  lr * sum_{j<i} g_j(theta_0)  ~  -(i/t) (theta_t - theta_0)."""
    if trace.steps == 0:
        return 0.0
    G = nnet.per_example_gradients(model, trace.theta0, data, wd) * m
    drift = trace.theta_t - trace.theta0
    scale = float(np.linalg.norm(drift)) or 1.0
    acc = np.zeros_like(drift)
    worst = 0.0
    t = trace.steps
    for i, b in enumerate(trace.batches, start=1):
        acc += G[b].mean(axis=0)
        worst = max(worst, float(np.linalg.norm(trace.lr * acc + (i / t) * drift)) / scale)
    return worst


def sparsity_sweep(model: ModelSpec, data: Dataset, sparsities, seeds, cfg: TrainConfig,
                   scrub_index: int | None = None, prune_all: bool = False) -> list[BoundReport]:
    """OMP masks (from the dense run of each seed) at every sparsity level."""
    sparsities = list(sparsities)
    seeds = list(seeds)
    if len(sparsities) < 3 or len(seeds) < 10:
        raise ValueError("a sweep needs >= 3 sparsity levels and >= 10 seeds")
    _check_theory_cfg(cfg)
    out = []
    for seed in seeds:
        c = cfg.replace(seed=int(seed), record_trace=True)
        theta0 = nnet.init_params(model, c.seed)
        dense = nnet.sgd(model, theta0, data, c).theta
        z = scrub_index
        if z is None:
            z = int(np.random.default_rng([int(seed), 7]).integers(len(data)))
        for s in sparsities:
            mask = sparsify.omp(model, dense, s, prune_all) if s > 0 else None
            rep = measure_unlearning_error(model, data, z, c, mask, init=theta0)
            rep.sparsity = float(s)
            out.append(rep)
    return out


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def sweep_summary(reports: list[BoundReport]) -> dict[float, dict[str, float]]:
    levels = sorted({r.sparsity for r in reports})
    out = {}
    for s in levels:
        rs = [r for r in reports if r.sparsity == s]
        ratios = [r.ratio for r in rs if r.bound_value > 0]
        out[s] = {
            "mean_error": float(np.mean([r.measured_error for r in rs])),
            "mean_bound": float(np.mean([r.bound_value for r in rs])),
            "mean_sigma": float(np.mean([r.sigma_m for r in rs])),
            "max_ratio": float(np.max(ratios)) if ratios else float("nan"),
            "n": len(rs),
        }
    return out


CSV_COLUMNS = ("sparsity", "seed", "measured_error", "bound_value", "sigma_m", "eta", "t")


def write_bound_csv(path, reports: list[BoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            d = asdict(r)
            w.writerow([repr(float(d[c])) if c not in ("seed", "t") else int(d[c]) for c in CSV_COLUMNS])
