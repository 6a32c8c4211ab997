import numpy as np
import pytest

from helpers import fit_full_batch, ridge_problem, ridge_solution
from sparsemu import influence, nnet, scenarios
from sparsemu.influence import IhvpConfig, InfluenceWeights
from sparsemu.nnet import Dataset, ModelSpec
from sparsemu.scenarios import DegenerateSplit, split_from_forget


def test_unlearn_weights_formula():
    w = influence.unlearn_weights(split_from_forget(4, [0]), 4)
    assert np.allclose(w.w, [0, 1 / 3, 1 / 3, 1 / 3], rtol=1e-15)
    d = influence.unlearn_weights(split_from_forget(10, [3]), 10).delta
    assert d[3] == pytest.approx(0.1)
    assert np.allclose(np.delete(d, 3), 0.1 - 1 / 9)


def test_unlearn_weights_degenerate():
    with pytest.raises(DegenerateSplit):
        influence.unlearn_weights(split_from_forget(4, []), 4)
    with pytest.raises((DegenerateSplit, ValueError)):
        influence.unlearn_weights(split_from_forget(4, [0, 1, 2, 3]), 4)


def test_influence_weights_validation():
    with pytest.raises(ValueError):
        InfluenceWeights(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        InfluenceWeights(np.array([1.5, -0.5]))
    assert InfluenceWeights(np.array([2.0, 1.0]), "sum").delta.tolist() == [-1.0, 0.0]


def test_ihvp_identity_hessian():
    # zero data weights: the data Hessian vanishes and damping 1 makes the system I
    spec = ModelSpec("linear", 3, 1, task="regress")
    g = np.random.default_rng(0).normal(size=4)
    quad = Dataset(np.zeros((1, 3)), np.zeros(1), weights=[0.0])
    out = influence.ihvp(spec, np.zeros(4), quad, g, IhvpConfig(damping=1.0))
    assert np.allclose(out, g, atol=1e-15)


def test_ihvp_random_spd_quadratic_and_solvers():
    spec, data = ridge_problem(seed=1, n=60, d=8)
    theta = np.zeros(spec.param_count)
    g = np.random.default_rng(1).normal(size=spec.param_count)
    H = nnet.hessian(spec, theta, data, 0.05)
    ref = np.linalg.solve(H, g)
    assert np.allclose(influence.ihvp(spec, theta, data, g, IhvpConfig(), 0.05), ref, atol=1e-8)
    diag = {}
    cg = influence.ihvp(spec, theta, data, g, IhvpConfig("cg", damping=1e-12, cg_tol=1e-12), 0.05, diag)
    assert np.allclose(cg, ref, atol=1e-8) and diag["iterations"] >= 1
    # round trip ihvp(H v) = v
    v = np.random.default_rng(2).normal(size=spec.param_count)
    assert np.allclose(influence.ihvp(spec, theta, data, H @ v, IhvpConfig(), 0.05), v, atol=1e-9)


def test_ihvp_errors():
    spec = ModelSpec("linear", 3, 1, task="regress")
    data = Dataset(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(influence.SingularHessian):
        influence.ihvp(spec, np.zeros(4), data, np.ones(4), IhvpConfig())
    with pytest.raises(influence.SolverTolerance) as e:
        sp, d = ridge_problem(seed=0, n=50, d=10)
        influence.ihvp(sp, np.zeros(11), d, np.ones(11), IhvpConfig("cg", 1e-6, cg_tol=1e-14, cg_max_iter=2))
    assert e.value.residual > 0
    with pytest.raises(ValueError):
        IhvpConfig("woodfisher", damping=0.0)


def test_woodfisher_recursion_is_exact_inverse():
    G = np.random.default_rng(3).normal(size=(30, 6))
    ref = np.linalg.inv(1e-2 * np.eye(6) + G.T @ G / 30)
    for b in (1, 4, 30):
        assert np.allclose(influence.woodfisher_inverse(G, 1e-2, b), ref, rtol=1e-8)


def test_woodfisher_cosine_on_50_param_logistic():
    spec = ModelSpec("linear", 24, 2)
    assert spec.param_count == 50
    wd = 1e-3
    data, _ = scenarios.make_blobs(2, 500, 24, 2.0, 0, test_per_class=0)
    theta = fit_full_batch(spec, data, wd)
    split = scenarios.random_split(data, 0.1, 0)
    w = influence.unlearn_weights(split, len(data))
    rhs = nnet.weighted_gradient(spec, theta, data, w.delta, wd)
    exact = influence.ihvp(spec, theta, data, rhs, IhvpConfig(), wd)
    wf = influence.ihvp(spec, theta, data, rhs, IhvpConfig("woodfisher", 1e-3), wd)
    cos = wf @ exact / np.linalg.norm(wf) / np.linalg.norm(exact)
    assert cos >= 0.9


def test_delta_zero_for_uniform_weights():
    spec, data = ridge_problem(seed=2, n=40, d=5)
    theta = ridge_solution(data, 0.1)
    w = InfluenceWeights(np.full(40, 1 / 40))
    assert np.all(influence.influence_delta(spec, theta, data, w, IhvpConfig(), 0.1) == 0.0)
    back = InfluenceWeights(np.ones(40), "sum")
    assert np.all(influence.influence_delta(spec, theta, data, back, IhvpConfig(), 0.1) == 0.0)


@pytest.mark.parametrize("forget", [[7], list(range(0, 200, 10))])
def test_ridge_target_curvature_is_exact(forget):
    spec, data = ridge_problem(seed=4)
    wd = 0.1
    theta_o = ridge_solution(data, wd)
    split = split_from_forget(len(data), forget)
    ref = ridge_solution(data, wd, split.remain)
    w = influence.unlearn_weights(split, len(data))
    rep = {}
    d = influence.influence_delta(spec, theta_o, data, w, IhvpConfig(curvature="target"), wd, rep)
    assert rep["stationary"]
    assert np.linalg.norm(theta_o + d - ref) / np.linalg.norm(ref) <= 1e-6


def test_ridge_uniform_curvature_is_first_order():
    spec, data = ridge_problem(seed=5)
    wd = 0.1
    theta_o = ridge_solution(data, wd)
    errs = []
    for k in (1, 10):
        split = split_from_forget(len(data), list(range(k)))
        ref = ridge_solution(data, wd, split.remain)
        w = influence.unlearn_weights(split, len(data))
        d = influence.influence_delta(spec, theta_o, data, w, IhvpConfig(), wd)
        errs.append((np.linalg.norm(theta_o + d - ref), np.linalg.norm(theta_o - ref)))
    for err, base in errs:
        assert err < 0.2 * base


def test_linearity_in_delta_w_on_quadratics():
    spec, data = ridge_problem(seed=6, n=30, d=4)
    theta_o = ridge_solution(data, 0.2)
    n = len(data)
    r = np.random.default_rng(0)
    w1 = r.dirichlet(np.ones(n))
    w2 = r.dirichlet(np.ones(n))
    d1 = influence.influence_delta(spec, theta_o, data, InfluenceWeights(w1), IhvpConfig(), 0.2)
    d2 = influence.influence_delta(spec, theta_o, data, InfluenceWeights(w2), IhvpConfig(), 0.2)
    d12 = influence.influence_delta(spec, theta_o, data, InfluenceWeights(0.5 * (w1 + w2)),
                                    IhvpConfig(), 0.2)
    assert np.allclose(d12, 0.5 * (d1 + d2), atol=1e-12)


def test_logistic_influence_moves_toward_retrain():
    spec = ModelSpec("linear", 5, 2)
    wd = 1e-2
    for seed in range(3):
        data, _ = scenarios.make_blobs(2, 60, 5, 2.0, seed, test_per_class=0)
        theta_o = fit_full_batch(spec, data, wd)
        split = scenarios.random_split(data, 0.1, seed)
        ref = fit_full_batch(spec, split.remain_set(data), wd, theta_o)
        out = influence.taylor_error_comparison(spec, theta_o, data, split, ref, IhvpConfig(), wd)
        assert out["ave"] < out["none"]
        w = influence.unlearn_weights(split, len(data))
        d = influence.influence_delta(spec, theta_o, data, w, IhvpConfig(), wd)
        assert np.linalg.norm(theta_o + d - ref) < np.linalg.norm(theta_o - ref)


def test_stationarity_warning_recorded():
    spec, data = ridge_problem(seed=7, n=30, d=4)
    w = influence.unlearn_weights(split_from_forget(30, [0]), 30)
    rep = {}
    influence.influence_delta(spec, np.ones(5), data, w, IhvpConfig(), 0.1, rep)
    assert not rep["stationary"] and rep["warnings"]


def test_masked_solve_stays_in_subspace():
    spec, data = ridge_problem(seed=8, n=50, d=6)
    theta = ridge_solution(data, 0.1)
    m = np.ones(7)
    m[[1, 4]] = 0
    theta = theta * m
    w = influence.unlearn_weights(split_from_forget(50, [2, 3]), 50)
    d = influence.influence_delta(spec, theta, data, w, IhvpConfig(), 0.1, mask=m)
    assert np.all(d[[1, 4]] == 0.0)
