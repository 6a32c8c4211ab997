"""Unlearning metrics and the confidence-threshold membership attack.

All accuracy-type metrics are percentages in [0, 100].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nnet
from .nnet import Dataset, ModelSpec
from .scenarios import DegenerateSplit, ForgetSplit

GAP_METRICS = ("ua", "mia_efficacy", "ra", "ta")


def accuracy(model: ModelSpec, theta, data: Dataset) -> float:
    if data is None or len(data) == 0:
        raise DegenerateSplit("accuracy of an empty set is undefined")
    pred = nnet.predict(model, theta, data.X)
    return 100.0 * float(np.mean(pred == np.asarray(data.y, dtype=np.int64)))


def unlearning_accuracy(model: ModelSpec, theta_u, data: Dataset, split: ForgetSplit) -> float:
    if split.forget.size == 0:
        raise DegenerateSplit("forgetting set is empty")
    return 100.0 - accuracy(model, theta_u, split.forget_set(data))


def remaining_accuracy(model: ModelSpec, theta_u, data: Dataset, split: ForgetSplit) -> float:
    return accuracy(model, theta_u, split.remain_set(data))


def test_scope(test: Dataset, split: ForgetSplit) -> Dataset:
    """Test points evaluated by TA: forget-class points drop out for class-wise."""
    if split.scenario != "class-wise":
        return test
    keep = np.flatnonzero(np.asarray(test.y, dtype=np.int64) != split.forget_class)
    if keep.size == 0:
        raise DegenerateSplit("excluding the forgotten class empties the test set")
    return test.subset(keep)


def testing_accuracy(model: ModelSpec, theta_u, test: Dataset, split: ForgetSplit) -> float:
    return accuracy(model, theta_u, test_scope(test, split))


# -------------------------------------------------------------- membership attack


def confidence(model: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """Max softmax probability per example."""
    return nnet.probabilities(model, theta, data.X).max(axis=1)


@dataclass(frozen=True)
class MiaPredictor:
    """Predicts *member* when ``polarity * (score - threshold) >= 0``.

    For ``polarity = -1`` the comparison is strict (score < threshold), so
    swapping members and non-members exactly complements the decisions.
    """

    threshold: float
    polarity: int
    n_per_side: int
    train_balanced_accuracy: float

    def is_member(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=np.float64)
        if self.polarity > 0:
            return s >= self.threshold
        return s < self.threshold


def _balanced(pos: np.ndarray, neg: np.ndarray, thr: float, pol: int) -> float:
    if pol > 0:
        tpr = np.mean(pos >= thr)
        tnr = np.mean(neg < thr)
    else:
        tpr = np.mean(pos < thr)
        tnr = np.mean(neg >= thr)
    return 0.5 * (float(tpr) + float(tnr))


def train_mia(member_scores, nonmember_scores, seed: int) -> MiaPredictor:
    """Fit a single-threshold rule on balanced member / non-member scores.

    The larger side is subsampled (seeded) to the size of the smaller one.
    Thresholds sweep sorted unique scores plus +inf; the lowest threshold
    attaining the best balanced accuracy wins, polarity +1 before -1.
    """
    pos = np.asarray(member_scores, dtype=np.float64).ravel()
    neg = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DegenerateSplit("membership attack needs members and non-members")
    rng = np.random.default_rng(seed)
    k = min(pos.size, neg.size)
    if pos.size > k:
        pos = pos[np.sort(rng.choice(pos.size, size=k, replace=False))]
    if neg.size > k:
        neg = neg[np.sort(rng.choice(neg.size, size=k, replace=False))]
    cands = np.append(np.unique(np.concatenate([pos, neg])), np.inf)
    best = (-1.0, 0.0, 1)
    for pol in (1, -1):
        for thr in cands:
            acc = _balanced(pos, neg, thr, pol)
            if acc > best[0] + 1e-15:
                best = (acc, float(thr), pol)
    return MiaPredictor(best[1], best[2], k, best[0])


def fit_mia(model: ModelSpec, theta, member_data: Dataset, nonmember_data: Dataset,
            seed: int) -> MiaPredictor:
    return train_mia(confidence(model, theta, member_data),
                     confidence(model, theta, nonmember_data), seed)


def mia_efficacy(pred: MiaPredictor, model: ModelSpec, theta_u, data: Dataset,
                 split: ForgetSplit) -> float:
    """100 * TN / |D_f|: forget points the attack labels as non-members."""
    if split.forget.size == 0:
        raise DegenerateSplit("forgetting set is empty")
    member = pred.is_member(confidence(model, theta_u, split.forget_set(data)))
    tn = int(np.count_nonzero(~member))
    return 100.0 * tn / split.forget.size


def mia_privacy(pred: MiaPredictor, model: ModelSpec, theta_u, data: Dataset,
                split: ForgetSplit) -> float:
    """Member-prediction rate on D_r, as a percentage."""
    if split.remain.size == 0:
        raise DegenerateSplit("remaining set is empty")
    member = pred.is_member(confidence(model, theta_u, split.remain_set(data)))
    return 100.0 * int(np.count_nonzero(member)) / split.remain.size


# ---------------------------------------------------------------------- reports


@dataclass
class UnlearnReport:
    method: str
    sparsity: float
    scenario: str
    seed: int
    ua: float
    mia_efficacy: float
    mia_privacy: float
    ra: float
    ta: float
    rte_s: float
    disparity_avg: float | None = None
    asr: float | None = None
    sa: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ua", "mia_efficacy", "mia_privacy", "ra", "ta"):
            v = getattr(self, name)
            if v is None or not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v!r} is not a percentage")
        if not self.rte_s > 0:
            raise ValueError("run time must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def disparity_average(report, retrain_report) -> float:
    """Mean absolute gap over UA, MIA-Efficacy, RA and TA."""
    gaps = []
    for name in GAP_METRICS:
        a = _metric(report, name)
        b = _metric(retrain_report, name)
        gaps.append(abs(a - b))
    return float(sum(gaps) / len(gaps))


def _metric(report, name: str) -> float:
    v = report.get(name) if isinstance(report, dict) else getattr(report, name, None)
    if v is None:
        raise KeyError(f"report is missing metric {name!r}")
    return float(v)


def evaluate(model: ModelSpec, theta_u, data: Dataset, test: Dataset, split: ForgetSplit,
             *, method: str, sparsity: float, seed: int, rte_s: float,
             mia_seed: int | None = None) -> UnlearnReport:
    """Full-stack evaluation of one unlearned model.

    The attack is fit on ``theta_u`` itself: D_r members against the TA test
    scope as non-members.
    """
    scope = test_scope(test, split)
    pred = fit_mia(model, theta_u, split.remain_set(data), scope, seed if mia_seed is None else mia_seed)
    return UnlearnReport(
        method=method, sparsity=sparsity, scenario=split.scenario, seed=seed,
        ua=unlearning_accuracy(model, theta_u, data, split),
        mia_efficacy=mia_efficacy(pred, model, theta_u, data, split),
        mia_privacy=mia_privacy(pred, model, theta_u, data, split),
        ra=remaining_accuracy(model, theta_u, data, split),
        ta=accuracy(model, theta_u, scope),
        rte_s=rte_s,
    )
