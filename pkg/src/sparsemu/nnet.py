"""Small fully-connected models over a flat parameter vector.

Parameters live in one float64 vector. Each layer contributes its weight
matrix (row-major, shape ``(out, in)``) followed by its bias. Losses are
per-example weighted:

    L(w, theta) = sum_i w_i * (l_i(theta) + wd/2 * ||theta||^2)

so an ERM on the simplex carries the usual l2 penalty, a zero-weight set has
zero loss and gradient, and the penalty cancels for coefficient vectors that
sum to zero (the influence update relies on this).

Hessian-vector products are exact: a Pearlmutter R-pass through the same
backward pass for every architecture. ReLU has zero curvature almost
everywhere, so no second-order activation term appears.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._container import read_container, write_container

KINDS = ("linear", "mlp")
TASKS = ("classify", "regress")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TrainingDiverged(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. ``hidden`` must be empty for ``linear``."""

    kind: str
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = ()
    task: str = "classify"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.task == "classify" and self.n_classes < 2:
            raise ValueError("n_classes must be >= 2 for classification")
        if self.task == "regress" and self.n_classes != 1:
            raise ValueError("regression models have a single output")
        if self.kind == "linear" and self.hidden:
            raise ValueError("linear models take no hidden layers")
        if self.kind == "mlp" and (not self.hidden or min(self.hidden) < 1):
            raise ValueError("mlp needs at least one positive hidden width")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.n_classes]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    @property
    def depth(self) -> int:
        return len(self.layer_shapes)

    def layout(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) for each layer, in order."""
        out, pos = [], 0
        for o, i in self.layer_shapes:
            ws = slice(pos, pos + o * i)
            pos += o * i
            bs = slice(pos, pos + o)
            pos += o
            out.append((ws, bs))
        return out

    def bias_mask(self) -> np.ndarray:
        m = np.zeros(self.param_count, dtype=bool)
        for _, bs in self.layout():
            m[bs] = True
        return m

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], int(d["input_dim"]), int(d["n_classes"]),
                   tuple(d.get("hidden", ())), d.get("task", "classify"))


@dataclass
class Dataset:
    """Features, labels (integer classes or real targets) and example weights.

    ``weights`` defaults to uniform ``1/N``.
    """

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ShapeError("features must be an N x d matrix")
        n = self.X.shape[0]
        if n < 1:
            raise ShapeError("dataset needs at least one example")
        self.y = np.asarray(self.y)
        if self.y.shape != (n,):
            raise ShapeError(f"labels must have shape ({n},), got {self.y.shape}")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise ShapeError("weights must have one entry per example")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ValueError("weights must be finite and nonnegative")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` with uniform weights over the subset."""
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])

    def with_weights(self, w) -> "Dataset":
        return Dataset(self.X, self.y, w)

    def on_simplex(self, tol: float = 1e-12) -> bool:
        return abs(float(self.weights.sum()) - 1.0) <= tol


def check_weights(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count,):
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise NumericError("parameter vector has non-finite entries")
    return theta


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.param_count)
    for (o, i), (ws, _) in zip(spec.layer_shapes, spec.layout()):
        theta[ws] = rng.normal(0.0, np.sqrt(2.0 / i), size=o * i)
    return theta


def _unpack(spec: ModelSpec, theta: np.ndarray):
    return [(theta[ws].reshape(shape), theta[bs])
            for shape, (ws, bs) in zip(spec.layer_shapes, spec.layout())]


def _check_data(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[1] != spec.input_dim:
        raise ShapeError(f"model expects {spec.input_dim} features, data has {X.shape[1]}")
    if spec.task == "classify":
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ShapeError("classification labels must be integers")
        if y.size and (y.min() < 0 or y.max() >= spec.n_classes):
            raise ShapeError("labels outside [0, n_classes)")


def _forward(spec, layers, X):
    acts, pre = [X], []
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pre.append(z)
        a = z if li == len(layers) - 1 else np.maximum(z, 0.0)
        if li < len(layers) - 1:
            acts.append(a)
    if not np.all(np.isfinite(pre[-1])):
        raise NumericError("non-finite activations")
    return acts, pre


def _output_terms(spec, logits, y):
    """Per-example loss and d loss / d logits."""
    if spec.task == "regress":
        r = logits[:, 0] - y
        return 0.5 * r * r, r[:, None], None
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    p = np.exp(logp)
    yi = y.astype(np.int64)
    rows = np.arange(len(yi))
    losses = -logp[rows, yi]
    d = p.copy()
    d[rows, yi] -= 1.0
    return losses, d, p


def _backward(spec, layers, acts, pre, dout):
    """Given per-example dL/dlogits (already coefficient-scaled) return grad."""
    grads = []
    delta = dout
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append((delta.T @ acts[li], delta.sum(axis=0)))
        if li > 0:
            delta = (delta @ W) * (pre[li - 1] > 0.0)
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def _loss_grad(spec, theta, X, y, coef, wd, need_grad=True):
    layers = _unpack(spec, theta)
    acts, pre = _forward(spec, layers, X)
    losses, d, _ = _output_terms(spec, pre[-1], y)
    csum = float(coef.sum())
    loss = float(coef @ losses) + 0.5 * wd * csum * float(theta @ theta)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    if not need_grad:
        return loss, None
    g = _backward(spec, layers, acts, pre, d * coef[:, None])
    if wd:
        g = g + wd * csum * theta
    return loss, g


def _prepare(spec, theta, data):
    theta = check_weights(spec, theta)
    _check_data(spec, data.X, data.y)
    return theta


def loss(spec: ModelSpec, theta, data: Dataset, weight_decay: float = 0.0) -> float:
    theta = _prepare(spec, theta, data)
    return _loss_grad(spec, theta, data.X, data.y, data.weights, weight_decay, False)[0]


def per_example_losses(spec: ModelSpec, theta, data: Dataset) -> np.ndarray:
    theta = _prepare(spec, theta, data)
    layers = _unpack(spec, theta)
    _, pre = _forward(spec, layers, data.X)
    return _output_terms(spec, pre[-1], data.y)[0]


def gradient(spec: ModelSpec, theta, data: Dataset, weight_decay: float = 0.0) -> np.ndarray:
    theta = _prepare(spec, theta, data)
    return _loss_grad(spec, theta, data.X, data.y, data.weights, weight_decay)[1]


def weighted_gradient(spec: ModelSpec, theta, data: Dataset, coef, weight_decay: float = 0.0) -> np.ndarray:
    """Gradient of ``sum_i coef_i * l_i``; ``coef`` may be signed."""
    theta = _prepare(spec, theta, data)
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (len(data),):
        raise ShapeError("one coefficient per example required")
    return _loss_grad(spec, theta, data.X, data.y, coef, weight_decay)[1]


def per_example_gradients(spec: ModelSpec, theta, data: Dataset, weight_decay: float = 0.0) -> np.ndarray:
    """N x P matrix of unweighted per-example gradients (penalty included)."""
    theta = _prepare(spec, theta, data)
    layers = _unpack(spec, theta)
    acts, pre = _forward(spec, layers, data.X)
    _, d, _ = _output_terms(spec, pre[-1], data.y)
    n = len(data)
    blocks = [None] * len(layers)
    delta = d
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW = np.einsum("no,ni->noi", delta, acts[li]).reshape(n, -1)
        blocks[li] = np.concatenate([gW, delta], axis=1)
        if li > 0:
            delta = (delta @ W) * (pre[li - 1] > 0.0)
    G = np.concatenate(blocks, axis=1)
    if weight_decay:
        G += weight_decay * theta[None, :]
    return G


def _hvp_core(spec, theta, X, y, coef, wd, v):
    layers = _unpack(spec, theta)
    dirs = _unpack(spec, v)
    acts, pre = _forward(spec, layers, X)
    _, d, p = _output_terms(spec, pre[-1], y)
    L = len(layers)
    # forward R-pass
    r_acts = [np.zeros_like(X)]
    r_pre = []
    for li, ((W, _), (V, c)) in enumerate(zip(layers, dirs)):
        rz = r_acts[li] @ W.T + acts[li] @ V.T + c
        r_pre.append(rz)
        if li < L - 1:
            r_acts.append(rz * (pre[li] > 0.0))
    rz = r_pre[-1]
    if spec.task == "regress":
        r_d = rz
    else:
        r_d = p * (rz - (p * rz).sum(axis=1, keepdims=True))
    delta = d * coef[:, None]
    r_delta = r_d * coef[:, None]
    out = [None] * L
    for li in range(L - 1, -1, -1):
        W, _ = layers[li]
        V, _ = dirs[li]
        rgW = r_delta.T @ acts[li] + delta.T @ r_acts[li]
        out[li] = np.concatenate([rgW.ravel(), r_delta.sum(axis=0)])
        if li > 0:
            gate = pre[li - 1] > 0.0
            r_delta, delta = (r_delta @ W + delta @ V) * gate, (delta @ W) * gate
    hv = np.concatenate(out)
    if wd:
        hv = hv + wd * float(coef.sum()) * v
    return hv


def hvp(spec: ModelSpec, theta, data: Dataset, v, weight_decay: float = 0.0) -> np.ndarray:
    """Exact Hessian-vector product of :func:`loss` (R-operator)."""
    theta = _prepare(spec, theta, data)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeError("direction must match parameter length")
    return _hvp_core(spec, theta, data.X, data.y, data.weights, weight_decay, v)


def hessian(spec: ModelSpec, theta, data: Dataset, weight_decay: float = 0.0) -> np.ndarray:
    """Dense Hessian. Closed form for linear models, HVP columns otherwise."""
    theta = _prepare(spec, theta, data)
    P = spec.param_count
    if spec.kind != "linear":
        H = np.empty((P, P))
        eye = np.eye(P)
        for j in range(P):
            H[:, j] = _hvp_core(spec, theta, data.X, data.y, data.weights, weight_decay, eye[j])
        return 0.5 * (H + H.T)
    w = data.weights
    K, d = spec.n_classes, spec.input_dim
    Xa = np.hstack([data.X, np.ones((len(data), 1))])
    if spec.task == "regress":
        A = np.ones((len(data), 1, 1))
    else:
        layers = _unpack(spec, theta)
        _, pre = _forward(spec, layers, data.X)
        p = _output_terms(spec, pre[-1], data.y)[2]
        A = np.einsum("nk,kl->nkl", p, np.eye(K)) - np.einsum("nk,nl->nkl", p, p)
    Haug = np.einsum("n,nkl,nj,nm->kjlm", w, A, Xa, Xa).reshape(K * (d + 1), K * (d + 1))
    # augmented index (k, j) -> flat layout position
    idx = np.empty(K * (d + 1), dtype=np.int64)
    for k in range(K):
        idx[k * (d + 1) : k * (d + 1) + d] = k * d + np.arange(d)
        idx[k * (d + 1) + d] = K * d + k
    H = np.empty((P, P))
    H[np.ix_(idx, idx)] = Haug
    if weight_decay:
        H += weight_decay * float(w.sum()) * np.eye(P)
    return H


def logits(spec: ModelSpec, theta, X) -> np.ndarray:
    theta = check_weights(spec, theta)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError("feature matrix does not match model input")
    return _forward(spec, _unpack(spec, theta), X)[1][-1]


def probabilities(spec: ModelSpec, theta, X) -> np.ndarray:
    z = logits(spec, theta, X)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(spec: ModelSpec, theta, X) -> np.ndarray:
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits(spec, theta, X), axis=1)


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    record_trace: bool = False
    max_steps: int | None = None
    weighted: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be nonnegative")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class TrainTrace:
    theta0: np.ndarray
    theta_t: np.ndarray
    batches: list[np.ndarray]
    lr: float
    steps: int

    def __post_init__(self):
        if self.steps != len(self.batches):
            raise ValueError("trace step count must equal number of batches")


@dataclass
class SGDResult:
    theta: np.ndarray
    trace: TrainTrace | None
    steps: int
    last_loss: float
    stopped_early: bool = False
    info: dict = field(default_factory=dict)


def batch_schedule(n: int, cfg: TrainConfig) -> list[np.ndarray]:
    """Per-epoch seeded shuffles cut into contiguous batches."""
    rng = np.random.default_rng(cfg.seed)
    out: list[np.ndarray] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            out.append(perm[s : s + cfg.batch_size])
            if cfg.max_steps is not None and len(out) >= cfg.max_steps:
                return out
    return out


def sgd(
    spec: ModelSpec,
    init,
    data: Dataset,
    cfg: TrainConfig,
    mask=None,
    *,
    batches: Sequence[np.ndarray] | None = None,
    ascent: bool = False,
    l1_schedule: Callable[[int, int], float] | None = None,
    loss_limit: float | None = None,
    exclude=None,
) -> SGDResult:
    """Mini-batch SGD with heavy-ball momentum and optional mask projection.

    ``ascent`` flips the descent direction (the penalty terms keep their
    sign). ``l1_schedule(epoch, epochs)`` gives the l1 coefficient for each
    epoch; its subgradient uses ``sign(0) = 0``. With ``ascent`` set, a batch
    loss above ``loss_limit`` stops the run before that step is applied.

    ``exclude`` drops the listed example indices from every batch while
    keeping the batch denominator, so the remaining terms are bit-identical
    to the full run. A batch left empty is a no-op step.
    """
    theta = check_weights(spec, init).copy()
    _check_data(spec, data.X, data.y)
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != theta.shape:
            raise ShapeError("mask length does not match parameters")
        theta *= m
    theta0 = theta.copy()
    n = len(data)
    sched = list(batches) if batches is not None else batch_schedule(n, cfg)
    nb = max(1, -(-n // cfg.batch_size))
    vel = np.zeros_like(theta)
    last = float("nan")
    stopped = False
    done = 0
    drop = None if exclude is None else np.asarray(exclude, dtype=np.int64)
    for step, idx in enumerate(sched):
        denom = len(idx)
        if drop is not None:
            idx = idx[~np.isin(idx, drop)]
            if idx.size == 0:
                done += 1
                continue
        X, y = data.X[idx], data.y[idx]
        if cfg.weighted:
            coef = data.weights[idx] * (n / denom)
        else:
            coef = np.full(len(idx), 1.0 / denom)
        try:
            last, g = _loss_grad(spec, theta, X, y, coef, cfg.weight_decay)
        except NumericError:
            raise TrainingDiverged(step, float("nan")) from None
        if ascent:
            if loss_limit is not None and last > loss_limit:
                stopped = True
                break
            g = -g
            if cfg.weight_decay:
                g += 2.0 * cfg.weight_decay * float(coef.sum()) * theta
        if l1_schedule is not None:
            gamma = l1_schedule(step // nb, cfg.epochs)
            if gamma:
                g = g + gamma * np.sign(theta)
        if m is not None:
            g *= m
        if cfg.momentum:
            vel = cfg.momentum * vel + g
            theta -= cfg.lr * vel
        else:
            theta -= cfg.lr * g
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(step, last)
        done += 1
    trace = None
    if cfg.record_trace:
        used = [np.asarray(b, dtype=np.int64) for b in sched[:done]]
        trace = TrainTrace(theta0, theta.copy(), used, cfg.lr, done)
    return SGDResult(theta, trace, done, last, stopped)


def train(spec: ModelSpec, init, data: Dataset, cfg: TrainConfig, mask=None):
    """Deterministic SGD. Returns ``(theta_t, trace)``; trace is None unless recorded."""
    res = sgd(spec, init, data, cfg, mask)
    return res.theta, res.trace


def replay(spec: ModelSpec, trace: TrainTrace, data: Dataset, cfg: TrainConfig, mask=None) -> np.ndarray:
    return sgd(spec, trace.theta0, data, cfg.replace(record_trace=False), mask,
               batches=trace.batches).theta


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, spec: ModelSpec, theta, *, seed: int | None = None,
                    steps: int | None = None, extra: dict | None = None) -> None:
    theta = check_weights(spec, theta)
    header = {"model": spec.to_dict(), "seed": seed, "steps": steps,
              "param_count": spec.param_count}
    if extra:
        header["extra"] = extra
    write_container(path, header, theta.astype("<f8"))


def load_checkpoint(path):
    header, theta = read_container(path, "<f8")
    spec = ModelSpec.from_dict(header["model"])
    return spec, check_weights(spec, theta), header
