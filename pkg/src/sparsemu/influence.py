"""Weighted-ERM influence updates and inverse-Hessian-vector products.

The update for new example weights ``w`` around the uniform-weight optimum
``theta_o`` is

    delta(w) = H^{-1} grad_theta L(1/N - w, theta_o)

with ``H`` the Hessian of the uniform-weight loss at ``theta_o``
(``curvature="uniform"``). ``curvature="target"`` uses the Hessian of
``L(w, .)`` instead. That turns the update into one Newton step on the
reweighted objective, which is exact whenever the loss is quadratic in theta.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import Dataset, ModelSpec
from .scenarios import DegenerateSplit, ForgetSplit

log = logging.getLogger(__name__)

SOLVERS = ("exact", "cg", "woodfisher")


class SingularHessian(np.linalg.LinAlgError):
    pass


class SolverTolerance(ArithmeticError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class InfluenceWeights:
    w: np.ndarray
    normalization: str = "ave"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("influence weights must be finite and nonnegative")
        if self.normalization == "ave" and abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("ave-ERM weights must sum to one")

    @property
    def base(self) -> np.ndarray:
        """Weights of the original training run (1/N or 1)."""
        n = self.w.size
        return np.full(n, 1.0 / n) if self.normalization == "ave" else np.ones(n)

    @property
    def delta(self) -> np.ndarray:
        return self.base - self.w


@dataclass(frozen=True)
class IhvpConfig:
    solver: str = "exact"
    damping: float = 0.0
    cg_tol: float = 1e-10
    cg_max_iter: int = 1000
    woodfisher_batch: int = 1
    curvature: str = "uniform"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.solver != "exact" and not self.damping > 0:
            raise ValueError("iterative solvers need positive damping")
        if self.curvature not in ("uniform", "target"):
            raise ValueError("curvature is 'uniform' or 'target'")


def unlearn_weights(split: ForgetSplit, n: int, normalization: str = "ave") -> InfluenceWeights:
    if split.forget.size == 0:
        raise DegenerateSplit("forgetting set is empty")
    if split.remain.size == 0:
        raise DegenerateSplit("remaining set is empty")
    if split.n != n:
        raise DegenerateSplit("split does not cover the dataset")
    w = np.zeros(n)
    w[split.remain] = 1.0 / split.remain.size if normalization == "ave" else 1.0
    return InfluenceWeights(w, normalization)


def _cg(apply, b, tol, max_iter):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    bnorm = math.sqrt(float(b @ b)) or 1.0
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise SolverTolerance("operator is not positive definite along CG direction",
                                  math.sqrt(rs) / bnorm)
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        if math.sqrt(rs_new) / bnorm <= tol:
            return x, it, math.sqrt(rs_new) / bnorm
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverTolerance(f"CG did not reach tol={tol} in {max_iter} iterations",
                          math.sqrt(rs) / bnorm)


def woodfisher_inverse(G: np.ndarray, damping: float, batch: int = 1) -> np.ndarray:
    """Inverse of ``damping*I + G^T G / N`` by rank-``batch`` Woodbury updates.

    ``batch = 1`` is the Sherman-Morrison recursion.
    """
    n, P = G.shape
    Finv = np.eye(P) / damping
    for s in range(0, n, batch):
        U = G[s : s + batch]
        FU = Finv @ U.T
        core = n * np.eye(U.shape[0]) + U @ FU
        Finv -= FU @ np.linalg.solve(core, FU.T)
    return 0.5 * (Finv + Finv.T)


def ihvp(model: ModelSpec, theta, data: Dataset, g, cfg: IhvpConfig = IhvpConfig(),
         weight_decay: float = 0.0, diagnostics: dict | None = None, mask=None) -> np.ndarray:
    """(H + damping I)^{-1} g, with H the Hessian of the weighted loss on ``data``.

    With a mask the system is solved on the unmasked coordinates only and the
    result is zero elsewhere.
    """
    theta = nnet.check_weights(model, theta)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape or not np.all(np.isfinite(g)):
        raise ValueError("right-hand side must be finite and match the parameters")
    m = None if mask is None else np.asarray(mask, dtype=np.float64)
    if m is not None:
        g = g * m
    diag = diagnostics if diagnostics is not None else {}
    diag["solver"] = cfg.solver
    if cfg.solver == "exact":
        H = nnet.hessian(model, theta, data, weight_decay)
        if m is not None:
            keep = np.flatnonzero(m)
            x = np.zeros_like(g)
            x[keep] = _dense_solve(H[np.ix_(keep, keep)], g[keep], cfg.damping, diag)
            return x
        return _dense_solve(H, g, cfg.damping, diag)
    if cfg.solver == "cg":
        def apply(v):
            if m is not None:
                return m * nnet.hvp(model, theta, data, m * v, weight_decay) + cfg.damping * v
            return nnet.hvp(model, theta, data, v, weight_decay) + cfg.damping * v

        x, it, res = _cg(apply, g, cfg.cg_tol, cfg.cg_max_iter)
        diag["iterations"] = it
        diag["residual"] = res
        return x
    # WoodFisher: empirical Fisher of the data term; l2 penalty folds into damping
    G = nnet.per_example_gradients(model, theta, data)
    G = G * np.sqrt(data.weights * len(data))[:, None]
    if m is not None:
        G = G * m
    lam = cfg.damping + weight_decay * float(data.weights.sum())
    Finv = woodfisher_inverse(G, lam, cfg.woodfisher_batch)
    return Finv @ g


def _dense_solve(H: np.ndarray, g: np.ndarray, damping: float, diag: dict) -> np.ndarray:
    H = H.copy()
    H[np.diag_indices_from(H)] += damping
    try:
        c = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(H)
        if ev.min() <= 1e-12 * max(1.0, abs(ev).max()):
            raise SingularHessian(
                f"Hessian is singular or indefinite (min eigenvalue {ev.min():.3e})") from None
        x = np.linalg.solve(H, g)
    else:
        x = np.linalg.solve(c.T, np.linalg.solve(c, g))
    diag["residual"] = float(np.linalg.norm(H @ x - g) / (np.linalg.norm(g) or 1.0))
    return x


def stationarity_tolerance(model: ModelSpec) -> float:
    return 1e-4 * math.sqrt(model.param_count)


def influence_delta(model: ModelSpec, theta_o, data: Dataset, w: InfluenceWeights,
                    cfg: IhvpConfig = IhvpConfig(), weight_decay: float = 0.0,
                    report: dict | None = None, mask=None) -> np.ndarray:
    """Model update ``theta(w) - theta_o`` from the implicit-gradient formula.

    ``data`` supplies features and labels; its weights are ignored in favour
    of ``w.base`` (the original run) and ``w.w``.
    """
    theta_o = nnet.check_weights(model, theta_o)
    if w.w.size != len(data):
        raise nnet.ShapeError("influence weights do not match the dataset")
    diag = report if report is not None else {}
    base = data.with_weights(w.base)
    g0 = nnet.gradient(model, theta_o, base, weight_decay)
    if mask is not None:
        g0 = g0 * np.asarray(mask, dtype=np.float64)
    gnorm = float(np.linalg.norm(g0))
    tol = stationarity_tolerance(model)
    diag["grad_norm"] = gnorm
    diag["stationary"] = gnorm <= tol
    if gnorm > tol:
        msg = f"theta_o not stationary: |grad| = {gnorm:.3e} > {tol:.3e}"
        diag.setdefault("warnings", []).append(msg)
        log.warning(msg)
    dw = w.delta
    if not np.any(dw):
        return np.zeros_like(theta_o)
    rhs = nnet.weighted_gradient(model, theta_o, data, dw, weight_decay)
    curv = base if cfg.curvature == "uniform" else data.with_weights(w.w)
    return ihvp(model, theta_o, curv, rhs, cfg, weight_decay, diag, mask)


def taylor_error_comparison(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                            theta_retrain, cfg: IhvpConfig = IhvpConfig(),
                            weight_decay: float = 0.0) -> dict:
    """Distance to a retrained model under ave-ERM and sum-ERM weighting."""
    out = {}
    ref = np.asarray(theta_retrain, dtype=np.float64)
    for norm in ("ave", "sum"):
        w = unlearn_weights(split, len(data), norm)
        d = influence_delta(model, theta_o, data, w, cfg, weight_decay)
        out[norm] = float(np.linalg.norm(theta_o + d - ref))
    out["none"] = float(np.linalg.norm(np.asarray(theta_o) - ref))
    return out
