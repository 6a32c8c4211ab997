import numpy as np
import pytest

from helpers import ridge_problem, ridge_solution
from sparsemu import evalkit, nnet, scenarios, sparsify, unlearn
from sparsemu.influence import IhvpConfig
from sparsemu.nnet import Dataset, ModelSpec, TrainConfig
from sparsemu.scenarios import split_from_forget
from sparsemu.unlearn import UnlearnConfig


@pytest.fixture(scope="module")
def blob_setup():
    train, test = scenarios.make_blobs(3, 40, 6, 4.0, 0)
    spec = ModelSpec("mlp", 6, 3, (10,))
    cfg = TrainConfig(lr=0.05, epochs=15, batch_size=16, seed=0, momentum=0.9)
    theta, _ = nnet.train(spec, nnet.init_params(spec, 0), train, cfg)
    return spec, train, test, theta


def test_config_validation():
    with pytest.raises(ValueError):
        UnlearnConfig("nope")
    with pytest.raises(ValueError):
        UnlearnConfig("ff")
    with pytest.raises(ValueError):
        UnlearnConfig("ft", gamma=0.1)
    with pytest.raises(ValueError):
        UnlearnConfig("l1", scheduler="cosine")
    c = UnlearnConfig("l1")
    assert c.gamma == 5e-4 and c.scheduler == "constant" and c.epochs == 10
    assert UnlearnConfig("ga").epochs == 5
    assert UnlearnConfig("iu").ihvp.solver == "woodfisher"


def test_scheduler_values():
    g = 0.3
    assert unlearn.gamma_schedule("linear-decaying", g, 0, 10) == pytest.approx(2 * g)
    assert unlearn.gamma_schedule("linear-decaying", g, 10, 10) == 0.0
    assert unlearn.gamma_schedule("linear-growing", g, 0, 10) == 0.0
    assert unlearn.gamma_schedule("linear-growing", g, 10, 10) == pytest.approx(2 * g)
    assert unlearn.gamma_schedule("constant", g, 4, 10) == g
    # both linear schedules average to the constant one over an epoch grid
    T = 10
    for kind in ("linear-growing", "linear-decaying"):
        assert np.mean([unlearn.gamma_schedule(kind, g, t, T) for t in range(T + 1)]) == pytest.approx(g)


def test_retrain_empty_forget_equals_training(blob_setup):
    spec, train, _, _ = blob_setup
    split = split_from_forget(len(train), [])
    cfg = UnlearnConfig("retrain", epochs=3, lr=0.05, seed=4)
    out = unlearn.retrain(spec, train, split, cfg)
    ref, _ = nnet.train(spec, nnet.init_params(spec, 4), train, cfg.train_config())
    assert np.array_equal(out.theta, ref)
    assert out.seconds > 0


def test_retrain_class_wise_forgets_class(blob_setup):
    spec, train, _, _ = blob_setup
    split = scenarios.class_wise_split(train, 1)
    out = unlearn.retrain(spec, train, split, UnlearnConfig("retrain", epochs=15, lr=0.05))
    assert evalkit.unlearning_accuracy(spec, out.theta, train, split) >= 95.0


def test_zero_budget_identities(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.random_split(train, 0.1, 0)
    assert np.array_equal(unlearn.finetune(spec, theta, train, split, UnlearnConfig("ft", epochs=0)).theta, theta)
    ga = unlearn.gradient_ascent(spec, theta, train, split, UnlearnConfig("ga", epochs=0))
    assert np.array_equal(ga.theta, theta)
    ff = unlearn.fisher_forget(spec, theta, train, split, UnlearnConfig("ff", ff_noise=0.0))
    assert np.array_equal(ff.theta, theta)
    empty = split_from_forget(len(train), [])
    for m in ("ga", "iu"):
        cfg = UnlearnConfig(m)
        assert np.array_equal(unlearn.unlearn(spec, theta, train, empty, cfg).theta, theta)


def test_ga_one_full_batch_step(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.random_split(train, 0.1, 1)
    eta = 1e-2
    cfg = UnlearnConfig("ga", epochs=1, lr=eta, batch_size=len(split.forget))
    out = unlearn.gradient_ascent(spec, theta, train, split, cfg)
    expect = theta + eta * nnet.gradient(spec, theta, split.forget_set(train))
    assert np.allclose(out.theta, expect, atol=1e-15, rtol=0)


def test_ga_loss_limit_stops_early(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.class_wise_split(train, 0)
    out = unlearn.gradient_ascent(spec, theta, train, split,
                                  UnlearnConfig("ga", epochs=50, lr=1.0, ga_loss_limit=5.0))
    assert out.diagnostics["early_stop"]


def test_diagonal_fisher_brute_force():
    spec = ModelSpec("linear", 1, 1, task="regress")
    r = np.random.default_rng(0)
    data = Dataset(r.normal(size=(7, 1)), r.normal(size=7))
    theta = np.array([0.4, -0.1])
    h = 1e-6
    sq = np.zeros(2)
    for i in range(7):
        one = data.subset([i])
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            g = (nnet.loss(spec, theta + e, one) - nnet.loss(spec, theta - e, one)) / (2 * h)
            sq[j] += g * g / 7
    assert np.allclose(unlearn.diagonal_fisher(spec, theta, data), sq, rtol=1e-7)


def test_fisher_forget_formula(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.random_split(train, 0.1, 2)
    cfg = UnlearnConfig("ff", ff_noise=1e-3, seed=5)
    out = unlearn.fisher_forget(spec, theta, train, split, cfg)
    F = unlearn.diagonal_fisher(spec, theta, split.remain_set(train)) + cfg.ff_damping
    eps = np.random.default_rng(5).standard_normal(theta.size)
    assert np.allclose(out.theta, theta + 1e-3 * eps / F ** 0.25, atol=1e-15)


def test_ff_noise_search_respects_grid(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.class_wise_split(train, 0)
    lam = unlearn.search_ff_noise(spec, theta, train, split, UnlearnConfig("ff", ff_noise=0.0))
    assert lam in np.logspace(-9, -6, 4)


def test_l1_gamma_zero_equals_finetune(blob_setup):
    spec, train, _, theta = blob_setup
    split = scenarios.random_split(train, 0.1, 3)
    kw = dict(epochs=3, lr=0.01, seed=2, momentum=0.9)
    ft = unlearn.finetune(spec, theta, train, split, UnlearnConfig("ft", **kw))
    l1 = unlearn.l1_sparse_unlearn(spec, theta, train, split,
                                   UnlearnConfig("l1", gamma=0.0, scheduler="linear-decaying", **kw))
    assert np.array_equal(ft.theta, l1.theta)


@pytest.mark.parametrize("sched", ["constant", "linear-growing", "linear-decaying"])
def test_l1_shrinks_weights(blob_setup, sched):
    spec, train, _, theta = blob_setup
    split = scenarios.random_split(train, 0.1, 3)
    kw = dict(epochs=5, lr=0.01, seed=2)
    ft = unlearn.finetune(spec, theta, train, split, UnlearnConfig("ft", **kw))
    l1 = unlearn.l1_sparse_unlearn(spec, theta, train, split,
                                   UnlearnConfig("l1", gamma=1e-2, scheduler=sched, **kw))
    assert np.abs(l1.theta).mean() < np.abs(ft.theta).mean()


def test_every_method_respects_mask(blob_setup):
    spec, train, _, theta = blob_setup
    mask = sparsify.omp(spec, theta, 0.8)
    theta_o = sparsify.apply_mask(theta, mask)
    split = scenarios.random_split(train, 0.1, 4)
    for method in unlearn.METHODS:
        extra = {"ff_noise": 1e-3} if method == "ff" else {}
        if method not in ("ff", "iu"):
            extra["epochs"] = 2
        out = unlearn.unlearn(spec, theta_o, train, split, UnlearnConfig(method, **extra), mask)
        assert np.array_equal(out.theta * mask.as_float, out.theta), method


def test_influence_unlearn_ridge_matches_retrain():
    spec, data = ridge_problem(seed=9, n=150, d=12)
    wd = 0.05
    theta_o = ridge_solution(data, wd)
    split = scenarios.random_split(data, 0.1, 0)
    cfg = UnlearnConfig("iu", weight_decay=wd, ihvp=IhvpConfig(curvature="target"))
    out = unlearn.influence_unlearn(spec, theta_o, data, split, cfg)
    ref = ridge_solution(data, wd, split.remain)
    assert np.linalg.norm(out.theta - ref) / np.linalg.norm(ref) <= 1e-6


def test_sparse_ft_forgets_more_than_dense():
    """Paired seeds, class-wise: FT on a 95%-sparse model reaches higher UA."""
    sparse_ua, dense_ua = [], []
    for seed in range(10):
        train, _ = scenarios.make_blobs(4, 100, 20, 3.0, seed, test_per_class=0)
        spec = ModelSpec("mlp", 20, 4, (64,))
        cfg = TrainConfig(lr=0.05, epochs=30, batch_size=32, seed=seed, momentum=0.9,
                          weight_decay=5e-4)
        dense, _ = nnet.train(spec, nnet.init_params(spec, seed), train, cfg)
        split = scenarios.class_wise_split(train, 0)
        mask = sparsify.omp(spec, dense, 0.95)
        sparse, _ = nnet.train(spec, dense, train, cfg.replace(epochs=20), mask.as_float)
        ft = UnlearnConfig("ft", lr=0.01, epochs=10, seed=seed, momentum=0.9, weight_decay=5e-4)
        dense_ua.append(evalkit.unlearning_accuracy(
            spec, unlearn.finetune(spec, dense, train, split, ft).theta, train, split))
        sparse_ua.append(evalkit.unlearning_accuracy(
            spec, unlearn.finetune(spec, sparse, train, split, ft, mask).theta, train, split))
    assert np.mean(sparse_ua) > np.mean(dense_ua)
