"""Policy learning by minimizing the lambda-translated IPS objective.

:func:`etips_train` is the full driver: fit a propensity model on the logged
actions, estimate and floor propensities, train one policy per translation on
the grid, and keep the candidate with the lowest self-normalized risk.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from blbf._numeric import derive_seed
from blbf.data import DataError, LoggedDataset, split_indices
from blbf.estimators import ips_risk, policy_probabilities, snips_risk, tmf
from blbf.optim import DEFAULT_LAMBDA_GRID, DivergenceError, TrainConfig, minimize
from blbf.policy import PolicyShape, SoftmaxPolicy, estimate_propensities, softmax, train_supervised

__all__ = [
    "DEFAULT_LAMBDA_GRID", "DivergenceError", "TrainConfig", "TrainRun", "GridResult", "EtipsResult",
    "AllRunsFlaggedError", "tips_objective_and_gradient", "train_tips", "tips_grid", "etips_train",
    "finite_difference_check", "loss_range", "scaled_lambdas",
]


class AllRunsFlaggedError(RuntimeError):
    """Every candidate ended with zero overlap, so none can be selected."""


@dataclass
class TrainRun:
    lam: float
    policy: SoftmaxPolicy
    s: float
    snips: Optional[float]
    ips: float
    seed: int
    trace: List[float] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return not self.s > 0.0

    @property
    def params(self) -> np.ndarray:
        return self.policy.params


def _tips_batch(policy: SoftmaxPolicy, params: np.ndarray, x: np.ndarray, actions: np.ndarray,
                coef: np.ndarray) -> Tuple[float, np.ndarray]:
    """Objective ``mean(coef_i * pi(a_i|x_i))`` and its parameter gradient.

    ``coef_i = (loss_i - lambda) / p_i``. Through the softmax,
    ``d pi_a / d z_k = pi_a (1[k = a] - pi_k)``.
    """
    logits, cache = policy.forward(x, params)
    probs = softmax(logits)
    n = x.shape[0]
    rows = np.arange(n)
    pa = probs[rows, actions]
    obj = float(np.mean(coef * pa))
    w = (coef * pa / n)[:, None]
    dlogits = -w * probs
    dlogits[rows, actions] += w[:, 0]
    return obj, policy.backward(cache, dlogits, params)


def tips_objective_and_gradient(policy: SoftmaxPolicy, batch: LoggedDataset, propensities,
                                lam: float, params: np.ndarray | None = None) -> Tuple[float, np.ndarray]:
    p = np.asarray(propensities, dtype=float)
    if len(batch) == 0 or p.shape != (len(batch),):
        raise DataError("need one propensity per sample in a non-empty batch")
    if np.any(~(p > 0)):
        raise DataError("propensities must be strictly positive")
    coef = (batch.losses - lam) / p
    params = policy.params if params is None else params
    obj, grad = _tips_batch(policy, params, policy._check_input(batch.features), batch.actions, coef)
    if not np.isfinite(obj):
        raise DivergenceError(0)
    return obj, grad


def loss_range(losses) -> Tuple[float, float]:
    """Interval the translation grid is mapped into: ``(0, 1)`` for binary
    losses, otherwise the observed ``(min, max)``."""
    losses = np.asarray(losses, dtype=float)
    if np.all((losses == 0.0) | (losses == 1.0)):
        return 0.0, 1.0
    lo, hi = float(losses.min()), float(losses.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def scaled_lambdas(grid: Sequence[float], losses) -> List[float]:
    lo, hi = loss_range(losses)
    return [lo + float(g) * (hi - lo) for g in grid]


def _score(dataset: LoggedDataset, propensities, policy: SoftmaxPolicy) -> Tuple[float, Optional[float], float]:
    pi = policy_probabilities(policy, dataset)
    s = tmf(dataset, pi, propensities)
    ips = ips_risk(dataset, pi, propensities).value
    snips = snips_risk(dataset, pi, propensities).value if s > 0.0 else None
    return s, snips, ips


def train_tips(dataset: LoggedDataset, propensities, lam: float, shape: PolicyShape = PolicyShape(),
               config: TrainConfig = TrainConfig(), score_on: Tuple[LoggedDataset, np.ndarray] | None = None,
               ) -> TrainRun:
    """Minimize the translated IPS objective for one translation ``lam``.

    ``s`` and ``snips`` of the returned run are measured on the full training
    set, or on ``score_on = (dataset, propensities)`` when given.
    """
    p = np.asarray(propensities, dtype=float)
    if p.shape != (len(dataset),) or np.any(~(p > 0)):
        raise DataError("need one strictly positive propensity per sample")
    policy = SoftmaxPolicy.initialize(dataset.feature_dim, dataset.n_actions, shape, config.seed)
    x = dataset.features
    a = dataset.actions
    coef = (dataset.losses - lam) / p

    def fun(params, idx):
        return _tips_batch(policy, params, x[idx], a[idx], coef[idx])

    result = minimize(fun, policy.params, len(dataset), config)
    fitted = policy.with_params(result.params, lam=float(lam))
    eval_data, eval_p = score_on if score_on is not None else (dataset, p)
    s, snips, ips = _score(eval_data, eval_p, fitted)
    return TrainRun(float(lam), fitted, s, snips, ips, int(config.seed), result.trace)


@dataclass
class GridResult:
    policy: SoftmaxPolicy
    runs: List[TrainRun]
    best_index: int

    @property
    def best(self) -> TrainRun:
        return self.runs[self.best_index]


def tips_grid(dataset: LoggedDataset, propensities, shape: PolicyShape = PolicyShape(),
              config: TrainConfig = TrainConfig(), selection: str = "train",
              holdout_fraction: float = 0.2, lambdas: Sequence[float] | None = None) -> GridResult:
    """Train one candidate per translation and keep the lowest-SNIPS one.

    ``selection="train"`` scores candidates on the training data itself;
    ``"holdout"`` trains on a group-aware split and scores on the rest.
    """
    p = np.asarray(propensities, dtype=float)
    lams = scaled_lambdas(config.lambda_grid, dataset.losses) if lambdas is None else list(lambdas)
    if not lams:
        raise ValueError("lambda grid is empty")
    if selection == "train":
        fit_data, fit_p, score_on = dataset, p, None
    elif selection == "holdout":
        tr, ho = split_indices(dataset.group_keys(), holdout_fraction, derive_seed(config.seed, 7))
        fit_data, fit_p = dataset.subset(tr), p[tr]
        score_on = (dataset.subset(ho), p[ho])
    else:
        raise ValueError("selection must be 'train' or 'holdout'")
    runs = []
    for j, lam in enumerate(lams):
        cfg = config.replace(seed=derive_seed(config.seed, 100 + j))
        runs.append(train_tips(fit_data, fit_p, lam, shape, cfg, score_on=score_on))
    admitted = [j for j, r in enumerate(runs) if not r.flagged]
    if not admitted:
        raise AllRunsFlaggedError(f"all {len(runs)} candidates have zero overlap with logged actions")
    best = min(admitted, key=lambda j: (runs[j].snips, j))
    return GridResult(runs[best].policy, runs, best)


@dataclass
class EtipsResult:
    policy: SoftmaxPolicy
    runs: List[TrainRun]
    best_index: int
    propensity_model: SoftmaxPolicy
    propensities: np.ndarray
    clipped_count: int


def etips_train(dataset: LoggedDataset, propensity_model_inputs: LoggedDataset | None = None,
                shape: PolicyShape = PolicyShape(), config: TrainConfig = TrainConfig(),
                propensity_shape: PolicyShape | None = None, propensity_config: TrainConfig | None = None,
                selection: str = "train", propensity_model: SoftmaxPolicy | None = None) -> EtipsResult:
    """Learn a policy from logged data without logged propensities.

    The propensity model is fitted on ``propensity_model_inputs`` (default: the
    training data itself) unless a fitted ``propensity_model`` is supplied.
    """
    if propensity_model is None:
        src = dataset if propensity_model_inputs is None else propensity_model_inputs
        pcfg = propensity_config or config.replace(seed=derive_seed(config.seed, 1))
        propensity_model = train_supervised(src.features, src.actions, dataset.n_actions,
                                            propensity_shape or shape, pcfg)
    p_hat, clipped = estimate_propensities(propensity_model, dataset, config.propensity_floor)
    grid = tips_grid(dataset, p_hat, shape, config, selection=selection)
    return EtipsResult(grid.policy, grid.runs, grid.best_index, propensity_model, p_hat, clipped)


def finite_difference_check(policy: SoftmaxPolicy, batch: LoggedDataset | None = None, propensities=None,
                            lam: float = 0.0, step: float = 1e-5,
                            objective: Callable[[np.ndarray], Tuple[float, np.ndarray]] | None = None,
                            seed: int = 0, max_full: int = 500, n_subset: int = 100) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    By default the objective is the translated IPS objective on ``batch``;
    pass ``objective(params) -> (value, gradient)`` to check anything else.
    Policies with more than ``max_full`` parameters are checked on a random
    subset of ``n_subset`` coordinates.
    """
    if not 1e-8 <= step <= 1e-3:
        warnings.warn(f"finite-difference step {step:g} is outside [1e-8, 1e-3]; "
                      "results may be dominated by cancellation or truncation error",
                      RuntimeWarning, stacklevel=2)
    if objective is None:
        if batch is None or propensities is None:
            raise ValueError("batch and propensities are required for the default objective")

        def objective(params):
            return tips_objective_and_gradient(policy, batch, propensities, lam, params)

    theta = np.array(policy.params, dtype=float)
    _, grad = objective(theta)
    n = theta.size
    if n > max_full:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max(50, min(n_subset, n)), replace=False))
    else:
        coords = np.arange(n)
    fd = np.empty(coords.size)
    for k, j in enumerate(coords):
        plus = theta.copy()
        minus = theta.copy()
        plus[j] += step
        minus[j] -= step
        fd[k] = (objective(plus)[0] - objective(minus)[0]) / (2.0 * step)
    an = np.asarray(grad)[coords]
    floor = 1e-5 * max(1.0, float(np.max(np.abs(grad))) if grad.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    return float(np.max(np.abs(fd - an) / denom))
