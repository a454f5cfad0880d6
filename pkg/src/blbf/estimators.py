"""Counterfactual risk estimators and diagnostics for logged bandit data.

All estimators take the logged dataset, the evaluated policy's probability of
each logged action ``pi(a_i|x_i)`` and a propensity per sample. Passing logged
or model-estimated propensities is the caller's choice. Sums are correctly
rounded (``math.fsum``), so values do not depend on sample order.

``sample_weight`` turns each mean into a weighted mean; with the weights from
:func:`blbf.data.enumerate_logged_outcomes` that is the exact expectation of
the estimator under the logging distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from blbf._numeric import exact_sum
from blbf.data import DataError, LoggedDataset, SupervisedSample, ToyEnvironment
from blbf.policy import Featurizer, action_distribution


class NoOverlapError(ValueError):
    """The evaluated policy puts no mass on any logged action."""


class EmptyGroupError(ValueError):
    """ATENP needs both the matching and the non-matching group."""

    def __init__(self, group_one_size: int, group_two_size: int):
        super().__init__(f"ATENP undefined: group one has {group_one_size} samples, "
                         f"group two has {group_two_size}")
        self.group_one_size = group_one_size
        self.group_two_size = group_two_size


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    value: float
    m: int
    tmf: Optional[float] = None
    group_one_size: Optional[int] = None
    group_two_size: Optional[int] = None
    clipped_count: int = 0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.group_one_size is not None and self.group_one_size + (self.group_two_size or 0) != self.m:
            raise ValueError("group sizes must sum to m")

    def as_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "value": self.value,
            "tmf": self.tmf,
            "m": self.m,
            "group_one_size": self.group_one_size,
            "group_two_size": self.group_two_size,
            "clipped_count": self.clipped_count,
        }


def _ratios(dataset: LoggedDataset, policy_probs, propensities) -> np.ndarray:
    pi = np.asarray(policy_probs, dtype=float)
    p = np.asarray(propensities, dtype=float)
    m = len(dataset)
    if pi.shape != (m,) or p.shape != (m,):
        raise DataError(f"expected {m} policy probabilities and propensities, "
                        f"got {pi.shape} and {p.shape}")
    if np.any(~(p > 0)) or not np.all(np.isfinite(p)):
        raise DataError("propensities must be finite and strictly positive")
    return pi / p


def _mean(values: np.ndarray, sample_weight) -> float:
    if sample_weight is None:
        return exact_sum(values) / values.size
    w = np.asarray(sample_weight, dtype=float)
    if w.shape != values.shape:
        raise DataError("sample_weight must match the number of samples")
    return exact_sum(w * values) / exact_sum(w)


def policy_probabilities(policy, dataset: LoggedDataset) -> np.ndarray:
    """``pi(a_i|x_i)`` for every logged sample."""
    probs = policy.predict_proba(dataset.features)
    return probs[np.arange(len(dataset)), dataset.actions]


def tmf(dataset: LoggedDataset, policy_probs, propensities, sample_weight=None) -> float:
    """Treatment matching factor: mean importance weight (1 in expectation)."""
    return _mean(_ratios(dataset, policy_probs, propensities), sample_weight)


def ips_risk(dataset: LoggedDataset, policy_probs, propensities, sample_weight=None,
             clipped_count: int = 0) -> EstimateReport:
    r = _ratios(dataset, policy_probs, propensities)
    return EstimateReport("ips", _mean(dataset.losses * r, sample_weight), len(dataset),
                          tmf=_mean(r, sample_weight), clipped_count=clipped_count)


def snips_risk(dataset: LoggedDataset, policy_probs, propensities, sample_weight=None,
               clipped_count: int = 0) -> EstimateReport:
    r = _ratios(dataset, policy_probs, propensities)
    s = _mean(r, sample_weight)
    if s == 0.0:
        raise NoOverlapError("policy has no overlap with logged actions (TMF = 0)")
    value = _mean(dataset.losses * r, sample_weight) / s
    return EstimateReport("snips", value, len(dataset), tmf=s, clipped_count=clipped_count)


def translated_ips_risk(dataset: LoggedDataset, policy_probs, propensities, lam: float,
                        sample_weight=None, clipped_count: int = 0) -> EstimateReport:
    r = _ratios(dataset, policy_probs, propensities)
    value = _mean((dataset.losses - lam) * r, sample_weight)
    return EstimateReport("tips", value, len(dataset), tmf=_mean(r, sample_weight),
                          clipped_count=clipped_count)


def dr_risk(dataset: LoggedDataset, policy, propensities, loss_model, sample_weight=None,
            clipped_count: int = 0) -> EstimateReport:
    """Doubly robust risk: model-based term plus importance-weighted residual."""
    probs = policy.predict_proba(dataset.features)
    pred = np.asarray(loss_model.predict_all(dataset.features), dtype=float)
    if pred.shape != probs.shape:
        raise DataError(f"loss model predictions {pred.shape} do not match policy output {probs.shape}")
    idx = np.arange(len(dataset))
    r = _ratios(dataset, probs[idx, dataset.actions], propensities)
    direct = np.array([exact_sum(row) for row in probs * pred])
    terms = direct + r * (dataset.losses - pred[idx, dataset.actions])
    return EstimateReport("dr", _mean(terms, sample_weight), len(dataset),
                          tmf=_mean(r, sample_weight), clipped_count=clipped_count)


def atenp(dataset: LoggedDataset, policy) -> EstimateReport:
    """Mean loss where the logged action equals the policy's greedy choice,
    minus the mean loss elsewhere."""
    match = policy.greedy(dataset.features) == dataset.actions
    n1 = int(np.count_nonzero(match))
    n2 = len(dataset) - n1
    if n1 == 0 or n2 == 0:
        raise EmptyGroupError(n1, n2)
    value = exact_sum(dataset.losses[match]) / n1 - exact_sum(dataset.losses[~match]) / n2
    return EstimateReport("atenp", value, len(dataset), group_one_size=n1, group_two_size=n2)


def true_risk(env: ToyEnvironment, policy) -> float:
    """Exact expected loss of ``policy`` by enumerating the environment."""
    terms = []
    for x in range(env.n_contexts):
        pi = action_distribution(policy, env.context_features[x])
        for a in range(env.n_actions):
            terms.append(float(env.context_probs[x]) * float(pi[a]) * float(env.loss_table[x, a]))
    return math.fsum(terms)


def accuracy_from_features(policy, features, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("accuracy of an empty set")
    return float(np.count_nonzero(policy.greedy(features) == labels)) / labels.size


def accuracy(policy, featurizer: Featurizer, supervised: Sequence[SupervisedSample]) -> float:
    """Fraction of samples where the greedy action is the true label."""
    if not supervised:
        raise DataError("accuracy of an empty set")
    return accuracy_from_features(policy, featurizer.transform(supervised),
                                  [s.label for s in supervised])
