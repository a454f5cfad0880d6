"""Featurizers, softmax policies, loss models and their supervised training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from blbf._numeric import derive_seed
from blbf.data import DataError, LoggedDataset, SupervisedSample
from blbf.optim import TrainConfig, minimize

FEATURIZER_MODES = ("mean-pool", "last-step", "mean-pool-concat-static")


class BandError(RuntimeError):
    """No logging-policy checkpoint reached the requested accuracy band."""

    def __init__(self, best: float, band: Tuple[float, float]):
        super().__init__(f"no checkpoint reached accuracy band [{band[0]}, {band[1]}]; "
                         f"best held-out accuracy was {best:.4f}")
        self.best = best
        self.band = band


# --------------------------------------------------------------------------
# featurization

@dataclass(frozen=True, eq=False)
class Featurizer:
    """Fixed pooling encoder for ``(T, token_width)`` sequences.

    When ``center``/``scale`` are set the pooled vector is standardized.
    """

    mode: str = "mean-pool"
    token_width: int = 1
    static_width: int = 0
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.mode not in FEATURIZER_MODES:
            raise ValueError(f"unknown featurizer mode {self.mode!r}; choose from {FEATURIZER_MODES}")
        if self.mode != "mean-pool-concat-static" and self.static_width:
            raise ValueError("static features are only used by mean-pool-concat-static")
        for name in ("center", "scale"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).ravel()
                if v.size != self.output_dim:
                    raise ValueError(f"{name} must have {self.output_dim} entries")
                object.__setattr__(self, name, v)

    @property
    def output_dim(self) -> int:
        if self.mode == "mean-pool-concat-static":
            return self.token_width + self.static_width
        return self.token_width

    def raw(self, sequence, static_features=()) -> np.ndarray:
        seq = np.asarray(sequence, dtype=float)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DataError("sequence must be a non-empty (T, width) array")
        if seq.shape[1] != self.token_width:
            raise DataError(f"token width {seq.shape[1]} does not match featurizer width {self.token_width}")
        if self.mode == "last-step":
            return seq[-1].copy()
        pooled = seq.mean(axis=0)
        if self.mode == "mean-pool-concat-static":
            static = np.asarray(static_features, dtype=float).ravel()
            if static.size != self.static_width:
                raise DataError(f"expected {self.static_width} static features, got {static.size}")
            pooled = np.concatenate([pooled, static])
        return pooled

    def __call__(self, sequence, static_features=()) -> np.ndarray:
        z = self.raw(sequence, static_features)
        if self.center is not None:
            z = z - self.center
        if self.scale is not None:
            z = z / self.scale
        return z

    def transform(self, samples: Sequence[SupervisedSample]) -> np.ndarray:
        if not samples:
            return np.zeros((0, self.output_dim))
        return np.stack([self(s.sequence, s.static_features) for s in samples])

    def fit_standardizer(self, samples: Sequence[SupervisedSample]) -> "Featurizer":
        """Copy of this featurizer that standardizes to zero mean, unit variance."""
        z = np.stack([self.raw(s.sequence, s.static_features) for s in samples])
        std = z.std(axis=0)
        std[std < 1e-12] = 1.0
        return Featurizer(self.mode, self.token_width, self.static_width, z.mean(axis=0), std)


def featurize(sequence, static_features, featurizer: Featurizer) -> np.ndarray:
    return featurizer(sequence, static_features)


# --------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class PolicyShape:
    """Network shape: ``hidden=0`` is a linear map, otherwise one tanh layer."""

    hidden: int = 64
    init: str = "uniform"
    init_scale: float = 0.05

    def __post_init__(self) -> None:
        if self.hidden < 0:
            raise ValueError("hidden must be non-negative")
        if self.init not in ("uniform", "zeros"):
            raise ValueError("init must be 'uniform' or 'zeros'")


def _shapes(input_dim: int, n_out: int, hidden: int) -> List[Tuple[int, ...]]:
    if hidden == 0:
        return [(input_dim, n_out), (n_out,)]
    return [(input_dim, hidden), (hidden,), (hidden, n_out), (n_out,)]


def init_params(input_dim: int, n_out: int, shape: PolicyShape, seed: int) -> np.ndarray:
    size = sum(int(np.prod(s)) for s in _shapes(input_dim, n_out, shape.hidden))
    if shape.init == "zeros":
        return np.zeros(size)
    rng = np.random.default_rng(derive_seed(seed, 0))
    return rng.uniform(-shape.init_scale, shape.init_scale, size=size)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _Network:
    """Dense network over a flat, row-major parameter vector."""

    def __init__(self, input_dim: int, n_out: int, hidden: int, params: np.ndarray):
        self.input_dim = int(input_dim)
        self.n_out = int(n_out)
        self.hidden = int(hidden)
        self.shapes = _shapes(self.input_dim, self.n_out, self.hidden)
        params = np.array(params, dtype=float).ravel()
        expected = sum(int(np.prod(s)) for s in self.shapes)
        if params.size != expected:
            raise ValueError(f"expected {expected} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        params.setflags(write=False)
        self.params = params

    @property
    def n_params(self) -> int:
        return self.params.size

    def _unpack(self, params: np.ndarray) -> List[np.ndarray]:
        out, at = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(params[at:at + n].reshape(s))
            at += n
        return out

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise DataError(f"expected {self.input_dim} input features, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite input")
        return x

    def forward(self, x: np.ndarray, params: np.ndarray | None = None):
        p = self._unpack(self.params if params is None else params)
        if self.hidden == 0:
            w, b = p
            return x @ w + b, (x, None)
        w1, b1, w2, b2 = p
        h = np.tanh(x @ w1 + b1)
        return h @ w2 + b2, (x, h)

    def backward(self, cache, dout: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        x, h = cache
        if self.hidden == 0:
            return np.concatenate([(x.T @ dout).ravel(), dout.sum(axis=0)])
        _, _, w2, _ = self._unpack(self.params if params is None else params)
        dh = (dout @ w2.T) * (1.0 - h * h)
        return np.concatenate([(x.T @ dh).ravel(), dh.sum(axis=0),
                               (h.T @ dout).ravel(), dout.sum(axis=0)])


class SoftmaxPolicy(_Network):
    """Stochastic policy ``pi(a|x) = softmax(f(x))`` over ``n_actions`` actions."""

    deterministic = False

    def __init__(self, input_dim: int, n_actions: int, hidden: int = 64,
                 params: np.ndarray | None = None, meta: Dict | None = None):
        if n_actions < 1:
            raise ValueError("n_actions must be positive")
        if params is None:
            params = np.zeros(sum(int(np.prod(s)) for s in _shapes(input_dim, n_actions, hidden)))
        super().__init__(input_dim, n_actions, hidden, params)
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, input_dim: int, n_actions: int, shape: PolicyShape, seed: int) -> "SoftmaxPolicy":
        params = init_params(input_dim, n_actions, shape, seed)
        return cls(input_dim, n_actions, shape.hidden, params, meta={"seed": int(seed)})

    @property
    def n_actions(self) -> int:
        return self.n_out

    def with_params(self, params: np.ndarray, **meta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.input_dim, self.n_actions, self.hidden, params, {**self.meta, **meta})

    def logits(self, x) -> np.ndarray:
        return self.forward(self._check_input(x))[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def greedy(self, x) -> np.ndarray:
        # argmax over logits: ties go to the lowest id and shifts cannot reorder
        return np.argmax(self.logits(x), axis=1)

    def __repr__(self) -> str:
        kind = "linear" if self.hidden == 0 else f"hidden={self.hidden}"
        return f"SoftmaxPolicy(d={self.input_dim}, K={self.n_actions}, {kind})"


class FixedPolicy:
    """Context-free policy with a fixed action distribution."""

    def __init__(self, probs, deterministic: bool = False, input_dim: int | None = None, name: str = "fixed"):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a probability vector")
        self.probs = probs
        self.deterministic = bool(deterministic)
        self.input_dim = input_dim
        self.name = name
        self.meta: Dict = {}

    @property
    def n_actions(self) -> int:
        return self.probs.size

    def predict_proba(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = 1 if x.ndim == 1 else x.shape[0]
        return np.tile(self.probs, (n, 1))

    def greedy(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def action_distribution(policy, x) -> np.ndarray:
    """Action probabilities for a single context vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a single feature vector")
    return policy.predict_proba(x[None, :])[0]


def greedy_action(policy, x) -> int:
    return int(policy.greedy(np.asarray(x, dtype=float)[None, :])[0])


# --------------------------------------------------------------------------
# loss model

class LossModel(_Network):
    """Regressor ``(x, a) -> predicted loss`` squashed into ``[low, high]``.

    Input is the feature vector concatenated with a one-hot action code.
    """

    def __init__(self, input_dim: int, n_actions: int, hidden: int = 64,
                 params: np.ndarray | None = None, low: float = 0.0, high: float = 1.0,
                 meta: Dict | None = None):
        if not high > low:
            raise ValueError("loss range must satisfy high > low")
        if params is None:
            params = np.zeros(sum(int(np.prod(s)) for s in _shapes(input_dim + n_actions, 1, hidden)))
        super().__init__(input_dim + n_actions, 1, hidden, params)
        self.feature_dim = int(input_dim)
        self.n_actions = int(n_actions)
        self.low = float(low)
        self.high = float(high)
        self.meta = dict(meta or {})

    def encode(self, x, actions) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        onehot = np.zeros((x.shape[0], self.n_actions))
        onehot[np.arange(x.shape[0]), np.asarray(actions, dtype=np.int64)] = 1.0
        return np.hstack([x, onehot])

    def predict(self, x, actions) -> np.ndarray:
        z = self.forward(self._check_input(self.encode(x, actions)))[0][:, 0]
        return self.low + (self.high - self.low) / (1.0 + np.exp(-z))

    def predict_all(self, x) -> np.ndarray:
        """Predicted loss for every action, shape ``(n, K)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        n = x.shape[0]
        cols = [self.predict(x, np.full(n, a)) for a in range(self.n_actions)]
        return np.stack(cols, axis=1)

    def with_params(self, params) -> "LossModel":
        return LossModel(self.feature_dim, self.n_actions, self.hidden, params, self.low, self.high, self.meta)


class ConstantLossModel:
    """Loss model predicting one value for every ``(x, a)``."""

    def __init__(self, value: float, n_actions: int):
        self.value = float(value)
        self.n_actions = int(n_actions)

    def predict(self, x, actions) -> np.ndarray:
        return np.full(len(np.atleast_1d(actions)), self.value)

    def predict_all(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = 1 if x.ndim == 1 else x.shape[0]
        return np.full((n, self.n_actions), self.value)


class DirectMethodPolicy:
    """Policy choosing the action of lowest predicted loss.

    Deterministic by default. With a ``temperature`` it becomes the stochastic
    ``softmax(-predicted_loss / temperature)`` so that importance-weighted
    estimators can score it.
    """

    def __init__(self, loss_model, temperature: float | None = None):
        if temperature is not None and not temperature > 0:
            raise ValueError("temperature must be positive")
        self.loss_model = loss_model
        self.temperature = temperature
        self.deterministic = temperature is None
        self.input_dim = getattr(loss_model, "feature_dim", None)
        self.meta: Dict = {}

    @property
    def n_actions(self) -> int:
        return self.loss_model.n_actions

    def greedy(self, x) -> np.ndarray:
        return np.argmin(self.loss_model.predict_all(x), axis=1)

    def predict_proba(self, x) -> np.ndarray:
        if self.temperature is not None:
            return softmax(-np.asarray(self.loss_model.predict_all(x)) / self.temperature)
        a = self.greedy(x)
        out = np.zeros((a.size, self.n_actions))
        out[np.arange(a.size), a] = 1.0
        return out


def direct_method_action(loss_model, x, n_actions: int | None = None) -> int:
    preds = np.asarray(loss_model.predict_all(np.asarray(x, dtype=float)[None, :]))[0]
    if n_actions is not None and preds.size != n_actions:
        raise ValueError(f"loss model covers {preds.size} actions, expected {n_actions}")
    return int(np.argmin(preds))


def baseline_policy(kind: str, dataset: LoggedDataset):
    """``random``: exact uniform policy; ``most_frequent``: point mass on the
    modal logged action."""
    k = dataset.n_actions
    if kind == "random":
        return FixedPolicy(np.full(k, 1.0 / k), deterministic=False, input_dim=dataset.feature_dim, name="random")
    if kind == "most_frequent":
        counts = np.bincount(dataset.actions, minlength=k)
        probs = np.zeros(k)
        probs[int(np.argmax(counts))] = 1.0
        return FixedPolicy(probs, deterministic=True, input_dim=dataset.feature_dim, name="most_frequent")
    raise ValueError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------------
# supervised training

def cross_entropy_grad(policy: SoftmaxPolicy, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    logits, cache = policy.forward(x, params)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return float(loss), policy.backward(cache, dlogits, params)


def _accuracy(policy, x, y) -> float:
    return float(np.mean(policy.greedy(x) == y)) if len(y) else float("nan")


def train_supervised(inputs, targets, n_classes: int, shape: PolicyShape = PolicyShape(),
                     config: TrainConfig = TrainConfig(), validation: Tuple | None = None,
                     on_epoch=None) -> SoftmaxPolicy:
    """Fit a softmax policy to labelled contexts by mean cross-entropy.

    The returned policy's ``meta`` records the loss trace and final
    train/validation accuracy.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError("inputs must be (n, d) with one target per row")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"targets must lie in [0, {n_classes})")
    policy = SoftmaxPolicy.initialize(x.shape[1], n_classes, shape, config.seed)

    def fun(params, idx):
        return cross_entropy_grad(policy, params, x[idx], y[idx])

    def hook(epoch, params):
        return on_epoch(epoch, policy.with_params(params))

    result = minimize(fun, policy.params, x.shape[0], config, None if on_epoch is None else hook)
    fitted = policy.with_params(result.params, loss_trace=result.trace)
    fitted.meta["train_accuracy"] = _accuracy(fitted, x, y)
    if validation is not None:
        fitted.meta["validation_accuracy"] = _accuracy(fitted, *validation)
    return fitted


# large steps with momentum: the first in-band checkpoint is a confident, skewed classifier
LOGGING_CONFIG = TrainConfig(learning_rate=1.0, momentum=0.9, batch_size=32, epochs=300)


def train_logging_policy(supervised: Sequence[SupervisedSample], featurizer: Featurizer,
                         subset_fraction: float = 0.05, band: Tuple[float, float] = (0.60, 0.72),
                         seed: int = 0, shape: PolicyShape = PolicyShape(),
                         config: TrainConfig = LOGGING_CONFIG, heldout_size: int = 2000,
                         n_classes: int | None = None) -> Tuple[SoftmaxPolicy, np.ndarray]:
    """Train a deliberately mediocre classifier to act as logging policy.

    Trains on a random ``subset_fraction`` of ``supervised`` and returns the
    first per-epoch checkpoint whose held-out greedy accuracy lies in ``band``,
    together with the subset indices.
    """
    if not 0.0 < subset_fraction < 1.0:
        raise ValueError("subset_fraction must lie in (0, 1)")
    labels = np.array([s.label for s in supervised], dtype=np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    lo, hi = band
    if not 1.0 / k < lo <= hi < 1.0:
        raise ValueError(f"band must lie within (1/K, 1) = ({1.0 / k:.3f}, 1)")
    rng = np.random.default_rng(derive_seed(seed, 10))
    order = rng.permutation(len(supervised))
    n_sub = max(1, int(round(subset_fraction * len(supervised))))
    subset, rest = np.sort(order[:n_sub]), order[n_sub:]
    held = np.sort(rest[:heldout_size])
    x_all = featurizer.transform(supervised)
    x_sub, y_sub = x_all[subset], labels[subset]
    x_held, y_held = x_all[held], labels[held]

    found: Dict[str, object] = {}
    best = [0.0]

    def check(epoch, policy):
        acc = _accuracy(policy, x_held, y_held)
        best[0] = max(best[0], acc)
        if lo <= acc <= hi:
            found["policy"] = policy
            found["epoch"] = epoch
            found["accuracy"] = acc
            return True
        return False

    init = SoftmaxPolicy.initialize(x_all.shape[1], k, shape, derive_seed(seed, 11))
    if not check(-1, init):
        train_supervised(x_sub, y_sub, k, shape, config.replace(seed=derive_seed(seed, 11)), on_epoch=check)
    if "policy" not in found:
        raise BandError(best[0], band)
    policy = found["policy"]
    policy.meta.update(heldout_accuracy=found["accuracy"], checkpoint_epoch=found["epoch"],
                       subset_size=int(n_sub))
    return policy, subset


def estimate_propensities(model, dataset: LoggedDataset, floor: float = 1e-3) -> Tuple[np.ndarray, int]:
    """Model probability of each logged action, floored at ``floor``.

    Returns the floored values and how many were raised to the floor.
    """
    if getattr(model, "input_dim", None) not in (None, dataset.feature_dim):
        raise DataError(f"propensity model expects {model.input_dim} features, "
                        f"dataset has {dataset.feature_dim}")
    probs = model.predict_proba(dataset.features)
    p = probs[np.arange(len(dataset)), dataset.actions]
    low = p < floor
    return np.where(low, floor, p), int(np.count_nonzero(low))


def train_loss_model(dataset: LoggedDataset, shape: PolicyShape = PolicyShape(),
                     config: TrainConfig = TrainConfig()) -> LossModel:
    """Fit the outcome model ``(x, a) -> loss`` by binary cross-entropy on the
    loss rescaled into ``[0, 1]``."""
    losses = dataset.losses
    low, high = float(losses.min()), float(losses.max())
    if 0.0 <= low and high <= 1.0:
        low, high = 0.0, 1.0
    elif high == low:
        high = low + 1.0
    target = (losses - low) / (high - low)
    model = LossModel(dataset.feature_dim, dataset.n_actions, shape.hidden,
                      init_params(dataset.feature_dim + dataset.n_actions, 1, shape, config.seed),
                      low, high, meta={"seed": int(config.seed)})
    x = model.encode(dataset.features, dataset.actions)

    def fun(params, idx):
        z, cache = model.forward(x[idx], params)
        z = z[:, 0]
        t = target[idx]
        # log(1 + e^z) - t z, stable form
        loss = np.mean(np.logaddexp(0.0, z) - t * z)
        dz = (1.0 / (1.0 + np.exp(-z)) - t) / idx.size
        return float(loss), model.backward(cache, dz[:, None], params)

    result = minimize(fun, model.params, len(dataset), config)
    fitted = model.with_params(result.params)
    fitted.meta["loss_trace"] = result.trace
    return fitted
