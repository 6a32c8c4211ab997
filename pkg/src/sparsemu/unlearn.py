"""Unlearning methods: Retrain, FT, GA, FF, IU and l1-sparse fine-tuning.

Every method takes the original model ``theta_o`` (Retrain ignores it), the
training data, a :class:`ForgetSplit` and an optional mask, and returns an
:class:`UnlearnedModel` whose ``seconds`` is the wall-clock of the call.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evalkit, nnet
from .influence import IhvpConfig, influence_delta, unlearn_weights
from .nnet import Dataset, ModelSpec, TrainConfig
from .scenarios import ForgetSplit
from .sparsify import SparsityMask

METHODS = ("retrain", "ft", "ga", "ff", "iu", "l1")
SCHEDULERS = ("constant", "linear-growing", "linear-decaying")

_DEFAULT_EPOCHS = {"retrain": 30, "ft": 10, "ga": 5, "ff": 0, "iu": 0, "l1": 10}
_DEFAULT_LR = {"retrain": 0.05, "ft": 0.01, "ga": 1e-4, "ff": 0.0, "iu": 0.0, "l1": 0.01}


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    epochs: int | None = None
    lr: float | None = None
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    ff_noise: float | None = None
    ff_damping: float = 1e-8
    gamma: float | None = None
    scheduler: str | None = None
    ga_loss_limit: float = 100.0
    ihvp: IhvpConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs is None:
            object.__setattr__(self, "epochs", _DEFAULT_EPOCHS[self.method])
        if self.lr is None:
            object.__setattr__(self, "lr", _DEFAULT_LR[self.method])
        if self.method == "ff":
            if self.ff_noise is None or self.ff_noise < 0:
                raise ValueError("ff needs a nonnegative ff_noise")
        elif self.ff_noise is not None:
            raise ValueError("ff_noise only applies to ff")
        if self.method == "l1":
            if self.gamma is None:
                object.__setattr__(self, "gamma", 5e-4)
            if self.scheduler is None:
                object.__setattr__(self, "scheduler", "constant")
            if self.scheduler not in SCHEDULERS:
                raise ValueError(f"unknown scheduler {self.scheduler!r}")
            if self.gamma < 0:
                raise ValueError("gamma must be nonnegative")
        elif self.gamma is not None or self.scheduler is not None:
            raise ValueError("gamma/scheduler only apply to l1")
        if self.ihvp is None:
            # exact solves break on indefinite MLP Hessians; damped WoodFisher does not
            default = IhvpConfig("woodfisher", 1e-3) if self.method == "iu" else IhvpConfig()
            object.__setattr__(self, "ihvp", default)

    def train_config(self, **kw) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, momentum=self.momentum,
                           weight_decay=self.weight_decay, **kw)

    def replace(self, **kw) -> "UnlearnConfig":
        return replace(self, **kw)


@dataclass
class UnlearnedModel:
    theta: np.ndarray
    method: str
    seconds: float
    diagnostics: dict = field(default_factory=dict)


def _mask_array(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    bits = mask.bits if isinstance(mask, SparsityMask) else np.asarray(mask).astype(bool)
    if bits.shape != (n,):
        raise nnet.ShapeError("mask length does not match parameters")
    return bits.astype(np.float64)


def gamma_schedule(kind: str, gamma: float, t: float, T: float) -> float:
    """l1 coefficient at epoch ``t`` of ``T``."""
    if kind == "constant":
        return gamma
    if kind == "linear-growing":
        return (2.0 * t / T) * gamma
    if kind == "linear-decaying":
        return (2.0 - 2.0 * t / T) * gamma
    raise ValueError(f"unknown scheduler {kind!r}")


def retrain(model: ModelSpec, data: Dataset, split: ForgetSplit, cfg: UnlearnConfig,
            mask=None, init=None) -> UnlearnedModel:
    """Train from a fresh seeded initialisation on D_r only."""
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)
    theta0 = nnet.init_params(model, cfg.seed) if init is None else init
    res = nnet.sgd(model, theta0, split.remain_set(data), cfg.train_config(), m)
    return UnlearnedModel(res.theta, "retrain", time.perf_counter() - t0, {"steps": res.steps})


def finetune(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit, cfg: UnlearnConfig,
             mask=None) -> UnlearnedModel:
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)
    res = nnet.sgd(model, theta_o, split.remain_set(data), cfg.train_config(), m)
    return UnlearnedModel(res.theta, "ft", time.perf_counter() - t0, {"steps": res.steps})


def gradient_ascent(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                    cfg: UnlearnConfig, mask=None) -> UnlearnedModel:
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)
    theta = np.asarray(theta_o, dtype=np.float64).copy()
    diag: dict = {"steps": 0}
    if split.forget.size:
        res = nnet.sgd(model, theta, split.forget_set(data), cfg.train_config(), m,
                       ascent=True, loss_limit=cfg.ga_loss_limit)
        theta = res.theta
        diag = {"steps": res.steps, "early_stop": res.stopped_early}
    elif m is not None:
        theta *= m
    return UnlearnedModel(theta, "ga", time.perf_counter() - t0, diag)


def diagonal_fisher(model: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """Mean squared per-example gradient of the data loss."""
    G = nnet.per_example_gradients(model, theta, data)
    return np.mean(G * G, axis=0)


def fisher_forget(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                  cfg: UnlearnConfig, mask=None) -> UnlearnedModel:
    """theta_o + ff_noise * eps / F^(1/4), F the damped diagonal Fisher on D_r."""
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)
    theta = np.asarray(theta_o, dtype=np.float64).copy()
    F = diagonal_fisher(model, theta, split.remain_set(data)) + cfg.ff_damping
    rng = np.random.default_rng(cfg.seed)
    eps = rng.standard_normal(theta.size)
    theta = theta + cfg.ff_noise * eps / F ** 0.25
    if m is not None:
        theta *= m
    return UnlearnedModel(theta, "ff", time.perf_counter() - t0,
                          {"ff_noise": cfg.ff_noise, "fisher_min": float(F.min())})


def search_ff_noise(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                    cfg: UnlearnConfig, mask=None, grid=None, max_ra_drop: float = 5.0):
    """Greedy log-grid search: highest UA whose RA stays within ``max_ra_drop``."""
    grid = np.logspace(-9, -6, 4) if grid is None else np.asarray(grid, dtype=float)
    base_ra = evalkit.remaining_accuracy(model, theta_o, data, split)
    best, best_ua = float(grid[0]), -1.0
    for lam in grid:
        out = fisher_forget(model, theta_o, data, split, cfg.replace(ff_noise=float(lam)), mask)
        ra = evalkit.remaining_accuracy(model, out.theta, data, split)
        if base_ra - ra > max_ra_drop:
            continue
        ua = evalkit.unlearning_accuracy(model, out.theta, data, split)
        if ua > best_ua:
            best, best_ua = float(lam), ua
    return best


def influence_unlearn(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                      cfg: UnlearnConfig, mask=None) -> UnlearnedModel:
    """theta_o + delta(w_MU), solved in the unmasked subspace."""
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)
    theta = np.asarray(theta_o, dtype=np.float64).copy()
    diag: dict = {}
    if split.forget.size:
        w = unlearn_weights(split, len(data))
        theta = theta + influence_delta(model, theta, data, w, cfg.ihvp, cfg.weight_decay,
                                        report=diag, mask=m)
    if m is not None:
        theta *= m
    return UnlearnedModel(theta, "iu", time.perf_counter() - t0, diag)


def l1_sparse_unlearn(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit,
                      cfg: UnlearnConfig, mask=None) -> UnlearnedModel:
    """Fine-tune on D_r with a scheduled l1 penalty (soft, no thresholding)."""
    t0 = time.perf_counter()
    m = _mask_array(mask, model.param_count)

    def sched(epoch, epochs):
        return gamma_schedule(cfg.scheduler, cfg.gamma, epoch, epochs)

    res = nnet.sgd(model, theta_o, split.remain_set(data), cfg.train_config(), m,
                   l1_schedule=sched)
    return UnlearnedModel(res.theta, "l1", time.perf_counter() - t0,
                          {"steps": res.steps, "scheduler": cfg.scheduler, "gamma": cfg.gamma})


def unlearn(model: ModelSpec, theta_o, data: Dataset, split: ForgetSplit, cfg: UnlearnConfig,
            mask=None) -> UnlearnedModel:
    if cfg.method == "retrain":
        return retrain(model, data, split, cfg, mask)
    fn = {"ft": finetune, "ga": gradient_ascent, "ff": fisher_forget,
          "iu": influence_unlearn, "l1": l1_sparse_unlearn}[cfg.method]
    return fn(model, theta_o, data, split, cfg, mask)
