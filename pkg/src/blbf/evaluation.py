"""Offline evaluation reports and the supervised-to-bandit simulation study."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from blbf._numeric import derive_seed
from blbf.data import (DataError, LoggedDataset, convert_to_bandit, format_logged_csv,
                       generate_counting_task, split_indices)
from blbf.document import NA, render
from blbf.estimators import (EmptyGroupError, EstimateReport, accuracy_from_features, atenp, dr_risk,
                             ips_risk, policy_probabilities)
from blbf.optim import TrainConfig
from blbf.policy import (LOGGING_CONFIG, DirectMethodPolicy, Featurizer, PolicyShape, baseline_policy,
                         estimate_propensities, train_logging_policy, train_loss_model, train_supervised)
from blbf.training import EtipsResult, TrainRun, etips_train, tips_grid, train_tips

METHODS = ("DM", "RP", "IPS", "tIPS", "eIPS", "etIPS", "skyline")
EMPTY_GROUP = "empty-group"

Cell = Union[float, str]


def diagnose_overfit(item: Union[TrainRun, EstimateReport, float]) -> str:
    """Classify a treatment matching factor as healthy, suspicious or overfit."""
    if isinstance(item, TrainRun):
        s = item.s
    elif isinstance(item, EstimateReport):
        if item.tmf is None:
            raise ValueError(f"{item.estimator} report carries no TMF")
        s = item.tmf
    else:
        s = float(item)
    if s >= 0.5:
        return "healthy"
    if s >= 0.1:
        return "suspicious"
    return "overfit"


# --------------------------------------------------------------------------
# offline evaluation on logged data

@dataclass
class EvaluationRow:
    name: str
    atenp: Cell
    ips: Cell
    dr: Cell
    tmf: Cell
    group_one_size: Optional[int]
    group_two_size: Optional[int]
    clipped_count: int

    def cells(self) -> Dict[str, object]:
        return {
            "atenp": self.atenp, "ips": self.ips, "dr": self.dr, "tmf": self.tmf,
            "group_one_size": self.group_one_size, "group_two_size": self.group_two_size,
            "clipped_count": self.clipped_count,
        }


@dataclass
class EvaluationReport:
    rows: List[EvaluationRow]
    metadata: Dict[str, object] = field(default_factory=dict)

    def row(self, name: str) -> EvaluationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_document(self, config: Dict | None = None) -> str:
        sections = {"metadata": dict(self.metadata)}
        for r in self.rows:
            sections[f"policy.{r.name}"] = r.cells()
        return render("evaluation-report", sections, config)

    def to_table(self) -> str:
        head = ["policy", "ATENP", "IPS", "DR", "TMF", "n1", "n2"]
        body = []
        for r in self.rows:
            body.append([r.name] + [_short(c) for c in (r.atenp, r.ips, r.dr, r.tmf)]
                        + [NA if r.group_one_size is None else str(r.group_one_size),
                           NA if r.group_two_size is None else str(r.group_two_size)])
        return _align([head] + body)


def _short(cell: Cell) -> str:
    return cell if isinstance(cell, str) else f"{cell:.4f}"


def _align(rows: List[List[str]]) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dataset_digest(dataset: LoggedDataset) -> str:
    return hashlib.sha256(format_logged_csv(dataset).encode("utf-8")).hexdigest()


def evaluate_offline(test: LoggedDataset, policies: Sequence[Tuple[str, object]], propensity_model,
                     loss_model, floor: float = 1e-3, metadata: Dict | None = None) -> EvaluationReport:
    """ATENP, IPS, DR and TMF for each policy on held-out logged data.

    IPS, DR and TMF use propensities estimated by ``propensity_model``;
    deterministic policies get ``n/a`` in those cells.
    """
    if len(test) == 0:
        raise DataError("empty test set")
    names = [n for n, _ in policies]
    if len(set(names)) != len(names):
        raise ValueError("policy names must be unique")
    p_hat, clipped = estimate_propensities(propensity_model, test, floor)
    rows = []
    for name, policy in policies:
        try:
            at = atenp(test, policy)
            at_cell: Cell = at.value
            n1, n2 = at.group_one_size, at.group_two_size
        except EmptyGroupError as exc:
            at_cell, n1, n2 = EMPTY_GROUP, exc.group_one_size, exc.group_two_size
        if getattr(policy, "deterministic", False):
            rows.append(EvaluationRow(name, at_cell, NA, NA, NA, n1, n2, clipped))
            continue
        ips = ips_risk(test, policy_probabilities(policy, test), p_hat, clipped_count=clipped)
        dr = dr_risk(test, policy, p_hat, loss_model, clipped_count=clipped)
        rows.append(EvaluationRow(name, at_cell, ips.value, dr.value, ips.tmf, n1, n2, clipped))
    meta = {"m": len(test), "dataset_sha256": dataset_digest(test), "propensity_floor": floor}
    meta.update(metadata or {})
    return EvaluationReport(rows, meta)


# --------------------------------------------------------------------------
# simulation study

@dataclass(frozen=True)
class SyntheticTaskSpec:
    n: int = 10_000
    n_classes: int = 3
    vocab: int = 200
    seq_len_mean: int = 20
    seq_len_spread: int = 5
    zero_prob: Optional[float] = None
    featurizer_mode: str = "mean-pool"
    subset_fraction: float = 0.05
    band: Tuple[float, float] = (0.60, 0.72)
    disjoint_logging_subset: bool = True
    test_fraction: float = 0.2
    shape: PolicyShape = PolicyShape()
    train_config: TrainConfig = TrainConfig()
    logging_config: TrainConfig = LOGGING_CONFIG

    def as_dict(self) -> dict:
        return {
            "n": self.n, "n_classes": self.n_classes, "vocab": self.vocab,
            "seq_len_mean": self.seq_len_mean, "seq_len_spread": self.seq_len_spread,
            "zero_prob": self.zero_prob, "featurizer_mode": self.featurizer_mode,
            "subset_fraction": self.subset_fraction, "band": list(self.band),
            "disjoint_logging_subset": self.disjoint_logging_subset, "test_fraction": self.test_fraction,
            "hidden": self.shape.hidden, "train_config": self.train_config.as_dict(),
            "logging_config": self.logging_config.as_dict(),
        }


@dataclass
class FoldResult:
    seed: int
    accuracy: Dict[str, float]
    tmf: Dict[str, float]
    logging_accuracy: float
    propensity_accuracy: Optional[float]
    # artifacts kept for offline evaluation of the fold
    featurizer: Featurizer
    logging_policy: object
    train: LoggedDataset
    test: LoggedDataset
    test_labels: np.ndarray
    policies: Dict[str, object]
    propensity_model: Optional[object] = None
    loss_model: Optional[object] = None
    runs: Dict[str, List[TrainRun]] = field(default_factory=dict)


def run_fold(task: SyntheticTaskSpec, methods: Sequence[str], seed: int) -> FoldResult:
    """One replicate: generate, log, convert, train every method, score."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    supervised = generate_counting_task(task.n, task.n_classes, task.vocab, task.seq_len_mean,
                                        task.seq_len_spread, derive_seed(seed, 1), task.zero_prob)
    featurizer = Featurizer(task.featurizer_mode, task.vocab).fit_standardizer(supervised)
    logging_policy, subset = train_logging_policy(
        supervised, featurizer, task.subset_fraction, task.band, derive_seed(seed, 2), task.shape,
        task.logging_config, n_classes=task.n_classes)
    if task.disjoint_logging_subset:
        keep = np.setdiff1d(np.arange(len(supervised)), subset)
        pool = [supervised[i] for i in keep]
    else:
        pool = list(supervised)
    logged, labels = convert_to_bandit(pool, featurizer, logging_policy, derive_seed(seed, 3))
    tr, te = split_indices(logged.group_keys(), task.test_fraction, derive_seed(seed, 4))
    train, test = logged.subset(tr), logged.subset(te)
    y_train, y_test = labels[tr], labels[te]
    cfg, shape = task.train_config, task.shape

    def cfg_for(k: int) -> TrainConfig:
        return cfg.replace(seed=derive_seed(seed, 20 + k))

    acc: Dict[str, float] = {}
    tmfs: Dict[str, float] = {}
    policies: Dict[str, object] = {}
    runs: Dict[str, List[TrainRun]] = {}
    propensity_model = None
    propensity_accuracy = None

    if "skyline" in methods:
        policies["skyline"] = train_supervised(train.features, y_train, task.n_classes, shape, cfg_for(0))
    if "RP" in methods:
        policies["RP"] = baseline_policy("random", train)
    # the outcome model doubles as the DR loss model for offline evaluation
    loss_model = train_loss_model(train, shape, cfg_for(1))
    if "DM" in methods:
        policies["DM"] = DirectMethodPolicy(loss_model)
    if "IPS" in methods:
        run = train_tips(train, train.propensities, 0.0, shape, cfg_for(2))
        policies["IPS"], tmfs["IPS"], runs["IPS"] = run.policy, run.s, [run]
    if "tIPS" in methods:
        grid = tips_grid(train, train.propensities, shape, cfg_for(3))
        policies["tIPS"], tmfs["tIPS"], runs["tIPS"] = grid.policy, grid.best.s, grid.runs
    if "eIPS" in methods or "etIPS" in methods:
        propensity_model = train_supervised(train.features, train.actions, task.n_classes, shape, cfg_for(4))
        propensity_accuracy = accuracy_from_features(propensity_model, test.features, y_test)
        p_hat, _ = estimate_propensities(propensity_model, train, cfg.propensity_floor)
        if "eIPS" in methods:
            run = train_tips(train, p_hat, 0.0, shape, cfg_for(5))
            policies["eIPS"], tmfs["eIPS"], runs["eIPS"] = run.policy, run.s, [run]
        if "etIPS" in methods:
            res: EtipsResult = etips_train(train, shape=shape, config=cfg_for(6),
                                           propensity_model=propensity_model)
            policies["etIPS"], tmfs["etIPS"], runs["etIPS"] = res.policy, res.runs[res.best_index].s, res.runs
    for name in methods:
        acc[name] = accuracy_from_features(policies[name], test.features, y_test)
    return FoldResult(
        seed=seed, accuracy=acc, tmf=tmfs,
        logging_accuracy=accuracy_from_features(logging_policy, test.features, y_test),
        propensity_accuracy=propensity_accuracy, featurizer=featurizer, logging_policy=logging_policy,
        train=train, test=test, test_labels=y_test, policies=policies,
        propensity_model=propensity_model, loss_model=loss_model, runs=runs,
    )


@dataclass
class SimulationReport:
    methods: List[str]
    folds: List[FoldResult]
    metadata: Dict[str, object] = field(default_factory=dict)

    def accuracies(self, method: str) -> np.ndarray:
        return np.array([f.accuracy[method] for f in self.folds])

    def mean(self, method: str) -> float:
        return float(self.accuracies(method).mean())

    def std(self, method: str) -> float:
        if len(self.folds) < 2:
            raise ValueError("std needs at least two folds")
        return float(self.accuracies(method).std(ddof=1))

    @property
    def logging_accuracies(self) -> np.ndarray:
        return np.array([f.logging_accuracy for f in self.folds])

    def to_document(self, config: Dict | None = None) -> str:
        sections: Dict[str, Dict[str, object]] = {"metadata": dict(self.metadata)}
        sections["folds"] = {
            "seeds": [f.seed for f in self.folds],
            "logging_accuracy": self.logging_accuracies,
            "propensity_accuracy": [f.propensity_accuracy for f in self.folds],
        }
        for m in self.methods:
            sections[f"method.{m}"] = {
                "accuracy": self.accuracies(m),
                "accuracy_mean": self.mean(m),
                "accuracy_std": self.std(m) if len(self.folds) >= 2 else None,
                "tmf": [f.tmf.get(m) for f in self.folds],
            }
        return render("simulation-report", sections, config)

    def to_table(self) -> str:
        rows = [["method", "accuracy", "+/- std", "TMF (mean)"]]
        for m in self.methods:
            t = [f.tmf[m] for f in self.folds if m in f.tmf]
            rows.append([m, f"{self.mean(m):.3f}",
                         f"{self.std(m):.4f}" if len(self.folds) >= 2 else NA,
                         f"{np.mean(t):.4f}" if t else NA])
        rows.append(["logging", f"{self.logging_accuracies.mean():.3f}",
                     f"{self.logging_accuracies.std(ddof=1):.4f}" if len(self.folds) >= 2 else NA, NA])
        return _align(rows)


def run_simulation_study(task: SyntheticTaskSpec = SyntheticTaskSpec(), methods: Sequence[str] = METHODS,
                         folds: int = 5, seed: int = 0) -> SimulationReport:
    """Repeat :func:`run_fold` over ``folds`` independently seeded replicates."""
    if folds < 2:
        raise ValueError("folds must be at least 2")
    results = [run_fold(task, methods, derive_seed(seed, 1000 + k)) for k in range(folds)]
    return SimulationReport(list(methods), results, {"seed": seed, "folds": folds})
