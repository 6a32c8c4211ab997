import math

import numpy as np
import pytest

from sparsemu import nnet, scenarios
from sparsemu.nnet import Dataset, ModelSpec
from sparsemu.scenarios import BackdoorSpec, DegenerateSplit, ForgetSplit


def test_blob_moments_and_centroid_distance():
    n, dim = 2000, 5
    train, _ = scenarios.make_blobs(3, n, dim, 4.0, 0, test_per_class=0)
    C = scenarios.blob_centroids(3, dim, 4.0, 0)
    for k in range(3):
        mean = train.X[train.y == k].mean(axis=0)
        assert np.all(np.abs(mean - C[k]) <= 3 / math.sqrt(n))
    d = np.linalg.norm(C[0] - C[1])
    assert d == pytest.approx(4.0)


def test_blobs_are_seeded():
    a, ta = scenarios.make_blobs(4, 20, 6, 3.0, 7)
    b, tb = scenarios.make_blobs(4, 20, 6, 3.0, 7)
    assert a.X.tobytes() == b.X.tobytes() and ta.y.tobytes() == tb.y.tobytes()
    c, _ = scenarios.make_blobs(4, 20, 6, 3.0, 8)
    assert not np.array_equal(a.X, c.X)
    assert np.bincount(a.y).tolist() == [20] * 4


def test_well_separated_blobs_nearest_centroid():
    train, test = scenarios.make_blobs(4, 50, 10, 40.0, 1)
    C = scenarios.blob_centroids(4, 10, 40.0, 1)
    pred = np.argmin(((test.X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == test.y) == 1.0


def test_make_blobs_validation():
    with pytest.raises(ValueError):
        scenarios.make_blobs(1, 10, 3, 1.0, 0)
    with pytest.raises(ValueError):
        scenarios.make_blobs(3, 1, 3, 1.0, 0)


def test_class_wise_split():
    data = Dataset(np.zeros((6, 1)), np.array([0, 1, 2, 1, 0, 1]))
    s = scenarios.class_wise_split(data, 1)
    assert s.forget.tolist() == [1, 3, 5] and s.remain.tolist() == [0, 2, 4]
    assert s.forget_class == 1 and s.scenario == "class-wise"
    with pytest.raises(DegenerateSplit):
        scenarios.class_wise_split(data, 3)
    with pytest.raises(DegenerateSplit):
        scenarios.class_wise_split(Dataset(np.zeros((2, 1)), np.array([1, 1])), 1)


def test_random_split_size_and_partition():
    data = Dataset(np.zeros((105, 1)), np.zeros(105, int))
    s = scenarios.random_split(data, 0.1, 3)
    assert s.forget.size == 10
    assert np.array_equal(np.sort(np.r_[s.forget, s.remain]), np.arange(105))
    assert np.array_equal(scenarios.random_split(data, 0.1, 3).forget, s.forget)
    with pytest.raises(DegenerateSplit):
        scenarios.random_split(Dataset(np.zeros((5, 1)), np.zeros(5, int)), 0.1, 0)
    with pytest.raises(ValueError):
        scenarios.random_split(data, 1.0, 0)


def test_random_split_inclusion_rate():
    data = Dataset(np.zeros((100, 1)), np.zeros(100, int))
    hits = np.zeros(100)
    for seed in range(1000):
        hits[scenarios.random_split(data, 0.1, seed).forget] += 1
    rate = hits / 1000
    assert abs(rate.mean() - 0.1) <= 0.02
    assert np.all(np.abs(rate - 0.1) <= 0.06)


def test_split_validation():
    with pytest.raises(DegenerateSplit):
        ForgetSplit(np.array([0, 1]), np.array([1, 2]), "random")
    with pytest.raises(DegenerateSplit):
        ForgetSplit(np.array([0]), np.array([2]), "random")
    with pytest.raises(DegenerateSplit):
        ForgetSplit(np.array([0]), np.array([], int), "random")
    with pytest.raises(ValueError):
        ForgetSplit(np.array([0]), np.array([1]), "sideways")


def test_poison_counts_and_untouched_rows():
    train, _ = scenarios.make_blobs(3, 41, 20, 3.0, 0, test_per_class=0)
    spec = BackdoorSpec(target=2, ratio=0.1, magnitude=4.0)
    poisoned, split = scenarios.poison(train, spec, 5)
    assert split.forget.size == math.floor(0.1 * 123)
    assert split.scenario == "backdoor" and split.poison_ratio == 0.1
    r = split.remain
    assert poisoned.X[r].tobytes() == train.X[r].tobytes()
    assert np.array_equal(poisoned.y[r], train.y[r])
    f = split.forget
    assert np.all(poisoned.y[f] == 2)
    trig = spec.trigger(20)
    assert np.count_nonzero(trig) == 2 and np.all(trig[-2:] == 4.0)
    assert np.allclose(poisoned.X[f] - train.X[f], trig)


def test_asr_constant_target_and_zero_offset():
    test = Dataset(np.random.default_rng(0).normal(size=(40, 4)), np.repeat(np.arange(4), 10))
    spec = ModelSpec("linear", 4, 4)
    theta = np.zeros(spec.param_count)
    theta[16 + 3] = 5.0  # always predicts class 3
    bd = BackdoorSpec(target=3, ratio=0.1)
    assert scenarios.asr(spec, theta, test, bd) == 100.0
    assert scenarios.standard_accuracy(spec, theta, test) == pytest.approx(100 / 4)
    # zero trigger: ASR is the fraction of non-target points already predicted as target
    r = np.random.default_rng(1)
    theta = r.normal(size=spec.param_count)
    zero = BackdoorSpec(target=1, ratio=0.1, magnitude=0.0)
    keep = test.y != 1
    expect = 100 * np.mean(nnet.predict(spec, theta, test.X[keep]) == 1)
    assert scenarios.asr(spec, theta, test, zero) == pytest.approx(expect)
    with pytest.raises(ValueError):
        scenarios.asr(spec, theta, test, BackdoorSpec(target=9, ratio=0.1))


def test_poison_validation():
    with pytest.raises(ValueError):
        BackdoorSpec(target=0, ratio=0.0)
    data = Dataset(np.zeros((5, 3)), np.zeros(5, int))
    with pytest.raises(DegenerateSplit):
        scenarios.poison(data, BackdoorSpec(target=0, ratio=0.1), 0)


def test_dataset_file_round_trip(tmp_path):
    train, _ = scenarios.make_blobs(3, 5, 4, 2.0, 0, test_per_class=0)
    p = tmp_path / "d.bin"
    scenarios.save_dataset(p, train.with_weights(np.arange(15) / 105), {"kind": "blobs"})
    back = scenarios.load_dataset(p)
    assert back.X.tobytes() == train.X.tobytes()
    assert back.y.dtype.kind == "i" and np.array_equal(back.y, train.y)
    assert np.allclose(back.weights, np.arange(15) / 105, rtol=0, atol=0)


def test_csv_import(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.5,0,2\n-1,2,0.25\n")
    d = scenarios.load_csv(p)
    assert d.X.tolist() == [[1.5, 2.0], [-1.0, 0.25]]
    assert d.y.tolist() == [0, 2] and d.y.dtype.kind == "i"
    with pytest.raises(ValueError):
        scenarios.load_csv(p, label_column="y")
