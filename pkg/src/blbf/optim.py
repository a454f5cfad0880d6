"""Training configuration and the mini-batch momentum loop shared by all models."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from blbf._numeric import derive_seed

DEFAULT_LAMBDA_GRID = tuple(round(0.1 * j, 10) for j in range(1, 10))


class DivergenceError(ArithmeticError):
    """Training produced a non-finite objective or parameter."""

    def __init__(self, epoch: int, detail: str = "non-finite objective"):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    lambda_grid: Tuple[float, ...] = DEFAULT_LAMBDA_GRID
    propensity_floor: float = 1e-3

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        grid = tuple(float(v) for v in self.lambda_grid)
        if any(not 0.0 < v < 1.0 for v in grid):
            raise ValueError("lambda_grid values must lie strictly inside (0, 1) of the loss range")
        object.__setattr__(self, "lambda_grid", grid)
        if not 0.0 < self.propensity_floor <= 1.0:
            raise ValueError("propensity_floor must lie in (0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "lambda_grid": list(self.lambda_grid),
            "propensity_floor": self.propensity_floor,
        }


ObjectiveFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class LoopResult:
    params: np.ndarray
    trace: List[float] = field(default_factory=list)
    stopped_early: bool = False


def minimize(fun: ObjectiveFn, params: np.ndarray, n: int, config: TrainConfig,
             on_epoch: Optional[Callable[[int, np.ndarray], bool]] = None) -> LoopResult:
    """Mini-batch gradient descent with heavy-ball momentum.

    ``fun(params, batch_index)`` returns the batch objective and its gradient.
    ``on_epoch(epoch, params)`` runs after every epoch; returning ``True``
    stops training. The per-epoch trace is the size-weighted mean of the batch
    objectives seen during that epoch.
    """
    rng = np.random.default_rng(derive_seed(config.seed, 1))
    params = np.array(params, dtype=float, copy=True)
    velocity = np.zeros_like(params)
    out = LoopResult(params)
    bs = config.batch_size
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            f, g = fun(params, idx)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                raise DivergenceError(epoch)
            velocity *= config.momentum
            velocity -= config.learning_rate * g
            params += velocity
            total += f * idx.size
        if not np.all(np.isfinite(params)):
            raise DivergenceError(epoch, "non-finite parameters")
        out.trace.append(total / n)
        out.params = params
        if on_epoch is not None and on_epoch(epoch, params):
            out.stopped_early = True
            break
    out.params = params
    return out
