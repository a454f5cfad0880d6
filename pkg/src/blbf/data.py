"""Logged bandit datasets, file ingestion, synthetic tasks and conversion."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from blbf.document import fmt_float

if TYPE_CHECKING:
    from blbf.policy import Featurizer

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised when input data violates a dataset invariant."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LoggedSample:
    features: np.ndarray
    action: int
    loss: float
    logged_propensity: Optional[float] = None
    group_id: Optional[str] = None


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Column-oriented collection of logged ``(x, a, loss, p)`` records.

    Arrays are copied and frozen at construction. ``propensities`` is either
    ``None`` (no propensity column was logged) or a length-m array.
    """

    features: np.ndarray
    actions: np.ndarray
    losses: np.ndarray
    n_actions: int
    propensities: Optional[np.ndarray] = None
    group_ids: Optional[Tuple[Optional[str], ...]] = None

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {features.shape}")
        m = features.shape[0]
        if m < 1:
            raise DataError("a logged dataset needs at least one sample")
        actions = np.asarray(self.actions)
        if actions.shape != (m,) or not np.issubdtype(actions.dtype, np.integer):
            raise DataError("actions must be an integer array of length m")
        losses = np.asarray(self.losses, dtype=float)
        if losses.shape != (m,):
            raise DataError("losses must have length m")
        if not np.all(np.isfinite(features)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(features), axis=1))[0])
            raise DataError(f"sample {bad}: non-finite feature")
        if not np.all(np.isfinite(losses)):
            raise DataError("losses must be finite")
        k = int(self.n_actions)
        if k < 1 or actions.min() < 0 or actions.max() >= k:
            raise DataError(f"actions must lie in [0, {k})")
        object.__setattr__(self, "features", _readonly(features))
        object.__setattr__(self, "actions", _readonly(actions.astype(np.int64)))
        object.__setattr__(self, "losses", _readonly(losses))
        object.__setattr__(self, "n_actions", k)
        if self.propensities is not None:
            p = np.asarray(self.propensities, dtype=float)
            if p.shape != (m,):
                raise DataError("propensities must have length m")
            bad = np.flatnonzero(~((p > 0) & (p <= 1)))
            if bad.size:
                raise DataError(f"sample {int(bad[0])}: propensity {p[bad[0]]!r} outside (0, 1]")
            object.__setattr__(self, "propensities", _readonly(p))
        if self.group_ids is not None:
            g = tuple(None if x is None or x == "" else str(x) for x in self.group_ids)
            if len(g) != m:
                raise DataError("group_ids must have length m")
            object.__setattr__(self, "group_ids", g)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return len(self)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_propensities(self) -> bool:
        return self.propensities is not None

    def __iter__(self) -> Iterator[LoggedSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> LoggedSample:
        return LoggedSample(
            features=self.features[i],
            action=int(self.actions[i]),
            loss=float(self.losses[i]),
            logged_propensity=None if self.propensities is None else float(self.propensities[i]),
            group_id=None if self.group_ids is None else self.group_ids[i],
        )

    @property
    def samples(self) -> List[LoggedSample]:
        return list(self)

    @classmethod
    def from_samples(cls, samples: Sequence[LoggedSample], n_actions: int | None = None) -> "LoggedDataset":
        if not samples:
            raise DataError("a logged dataset needs at least one sample")
        props = [s.logged_propensity for s in samples]
        if any(p is None for p in props) and not all(p is None for p in props):
            raise DataError("logged propensities must be present on all samples or none")
        groups = [s.group_id for s in samples]
        actions = np.array([s.action for s in samples], dtype=np.int64)
        return cls(
            features=np.stack([np.asarray(s.features, dtype=float) for s in samples]),
            actions=actions,
            losses=np.array([s.loss for s in samples], dtype=float),
            n_actions=int(actions.max()) + 1 if n_actions is None else n_actions,
            propensities=None if props[0] is None else np.array(props, dtype=float),
            group_ids=None if all(g is None for g in groups) else tuple(groups),
        )

    def subset(self, index) -> "LoggedDataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return LoggedDataset(
            features=self.features[index],
            actions=self.actions[index],
            losses=self.losses[index],
            n_actions=self.n_actions,
            propensities=None if self.propensities is None else self.propensities[index],
            group_ids=None if self.group_ids is None else tuple(self.group_ids[i] for i in index),
        )

    def with_losses(self, losses) -> "LoggedDataset":
        return LoggedDataset(self.features, self.actions, losses, self.n_actions,
                             self.propensities, self.group_ids)

    def without_propensities(self) -> "LoggedDataset":
        return LoggedDataset(self.features, self.actions, self.losses, self.n_actions,
                             None, self.group_ids)

    def group_keys(self) -> List[str]:
        """Split key per sample; ungrouped samples form singleton groups."""
        if self.group_ids is None:
            return [f"#{i}" for i in range(len(self))]
        return [g if g is not None else f"#{i}" for i, g in enumerate(self.group_ids)]


@dataclass(frozen=True, eq=False)
class SupervisedSample:
    sequence: np.ndarray
    label: int
    static_features: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        seq = np.asarray(self.sequence)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DataError(f"sequence must be a non-empty (T, width) array, got shape {seq.shape}")
        if int(self.label) < 0:
            raise DataError("label must be non-negative")
        object.__setattr__(self, "sequence", seq)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "static_features", np.asarray(self.static_features, dtype=float).ravel())


@dataclass(frozen=True, eq=False)
class ToyEnvironment:
    """A finite world: context distribution, per-(context, action) losses and
    context feature vectors."""

    context_probs: np.ndarray
    loss_table: np.ndarray
    context_features: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.context_probs, dtype=float)
        table = np.asarray(self.loss_table, dtype=float)
        feats = np.asarray(self.context_features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise DataError("context_probs must be a probability vector summing to 1")
        if table.ndim != 2 or table.shape[0] != probs.size:
            raise DataError("loss_table must be (n_contexts, n_actions)")
        if not np.all(np.isfinite(table)):
            raise DataError("loss_table must be finite")
        if feats.shape[0] != probs.size:
            raise DataError("one feature row per context is required")
        object.__setattr__(self, "context_probs", _readonly(probs))
        object.__setattr__(self, "loss_table", _readonly(table))
        object.__setattr__(self, "context_features", _readonly(feats))

    @property
    def n_contexts(self) -> int:
        return self.context_probs.size

    @property
    def n_actions(self) -> int:
        return self.loss_table.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, n_contexts: int, n_actions: int,
               dim: int = 2, binary: bool = False) -> "ToyEnvironment":
        probs = rng.dirichlet(np.ones(n_contexts))
        probs = probs / probs.sum()
        if binary:
            table = rng.integers(0, 2, size=(n_contexts, n_actions)).astype(float)
        else:
            table = rng.uniform(-1.0, 2.0, size=(n_contexts, n_actions))
        return cls(probs, table, rng.normal(size=(n_contexts, dim)))


# --------------------------------------------------------------------------
# logged CSV

DEFAULT_SCHEMA = {"action": "action", "loss": "loss", "propensity": "propensity",
                  "group_id": "group_id", "features": None}


def load_logged_csv(path, schema: Mapping | None = None, n_actions: int | None = None) -> LoggedDataset:
    """Read a logged-feedback CSV file.

    ``schema`` maps the roles ``action``, ``loss``, ``propensity``,
    ``group_id`` and ``features`` to column names. ``features`` may be a list
    of names; when omitted every ``f<j>`` column is used in index order.
    Optional columns missing from the header are treated as absent.
    """
    spec = dict(DEFAULT_SCHEMA)
    spec.update(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name: j for j, name in enumerate(header)}
        for role in ("action", "loss"):
            if spec[role] not in col:
                raise DataError(f"{path}: missing required column {spec[role]!r}")
        feat_names = spec["features"]
        if feat_names is None:
            numbered = sorted((int(h[1:]), h) for h in header if h[:1] == "f" and h[1:].isdigit())
            feat_names = [h for _, h in numbered]
            if [j for j, _ in numbered] != list(range(len(numbered))):
                raise DataError(f"{path}: feature columns must be f0..f{{d-1}} without gaps")
        missing = [f for f in feat_names if f not in col]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        p_col = col.get(spec["propensity"]) if spec["propensity"] else None
        g_col = col.get(spec["group_id"]) if spec["group_id"] else None
        f_cols = [col[f] for f in feat_names]

        feats, actions, losses, props, groups = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                a = int(row[col[spec["action"]]])
                loss = float(row[col[spec["loss"]]])
                x = [float(row[j]) for j in f_cols]
                p = float(row[p_col]) if p_col is not None else None
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            if a < 0:
                raise DataError(f"row {lineno}: negative action {a}")
            if not np.all(np.isfinite(x)):
                raise DataError(f"row {lineno}: non-finite feature")
            if not np.isfinite(loss):
                raise DataError(f"row {lineno}: non-finite loss")
            if p is not None and not (0.0 < p <= 1.0):
                raise DataError(f"row {lineno}: propensity {p!r} outside (0, 1]")
            feats.append(x)
            actions.append(a)
            losses.append(loss)
            props.append(p)
            groups.append(row[g_col].strip() if g_col is not None else None)
    if not actions:
        raise DataError(f"{path}: no data rows")
    k = max(actions) + 1 if n_actions is None else int(n_actions)
    if max(actions) >= k:
        raise DataError(f"{path}: action {max(actions)} exceeds n_actions={k}")
    return LoggedDataset(
        features=np.array(feats, dtype=float).reshape(len(actions), len(f_cols)),
        actions=np.array(actions, dtype=np.int64),
        losses=np.array(losses, dtype=float),
        n_actions=k,
        propensities=np.array(props, dtype=float) if p_col is not None else None,
        group_ids=tuple(groups) if g_col is not None else None,
    )


def format_logged_csv(dataset: LoggedDataset) -> str:
    header = []
    if dataset.group_ids is not None:
        header.append("group_id")
    header += ["action", "loss"]
    if dataset.propensities is not None:
        header.append("propensity")
    header += [f"f{j}" for j in range(dataset.feature_dim)]
    lines = [",".join(header)]
    for i in range(len(dataset)):
        cells = []
        if dataset.group_ids is not None:
            cells.append(dataset.group_ids[i] or "")
        cells += [str(int(dataset.actions[i])), fmt_float(dataset.losses[i])]
        if dataset.propensities is not None:
            cells.append(fmt_float(dataset.propensities[i]))
        cells += [fmt_float(v) for v in dataset.features[i]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx_pair(images_path, labels_path, n_classes: int = 10) -> List[SupervisedSample]:
    """Load an IDX image/label file pair; each image row becomes one step."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise DataError("IDX file truncated in header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad image magic {magic:#010x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad label magic {lmagic:#010x}")
    if n != ln:
        raise DataError(f"item count mismatch: {n} images vs {ln} labels")
    if len(img) != 16 + n * rows * cols:
        raise DataError(f"{images_path}: expected {16 + n * rows * cols} bytes, found {len(img)}")
    if len(lab) != 8 + n:
        raise DataError(f"{labels_path}: expected {8 + n} bytes, found {len(lab)}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.flatnonzero(labels >= n_classes)[0])
        raise DataError(f"label {labels[bad]} at item {bad} outside [0, {n_classes})")
    return [SupervisedSample(pixels[i] / 255.0, int(labels[i])) for i in range(n)]


# --------------------------------------------------------------------------
# synthetic counting task

def generate_counting_task(n: int, n_classes: int = 3, vocab: int = 200, seq_len_mean: int = 20,
                           seq_len_spread: int = 5, seed: int = 0,
                           zero_prob: float | None = None) -> List[SupervisedSample]:
    """Sequences of one-hot tokens labelled by their number of ``0`` tokens.

    Counts above ``n_classes - 1`` share the top class. Lengths are uniform on
    ``seq_len_mean +/- seq_len_spread``. Token 0 is drawn with probability
    ``zero_prob`` (default ``1 / seq_len_mean``, one zero per sequence on
    average) and the other tokens uniformly. Classes are
    balanced by rejection sampling with at most ``100 * n`` draws.
    """
    if n < 1:
        raise DataError("n must be positive")
    if n_classes < 2:
        raise DataError("n_classes must be at least 2")
    if vocab < 2:
        raise DataError("vocab must be at least 2")
    if not seq_len_mean > seq_len_spread >= 0:
        raise DataError("need seq_len_mean > seq_len_spread >= 0")
    max_len = seq_len_mean + seq_len_spread
    if n_classes - 1 > max_len:
        raise DataError(f"infeasible balance: at most {max_len} zeros fit in a sequence "
                        f"but {n_classes} classes were requested")
    p0 = 1.0 / seq_len_mean if zero_prob is None else float(zero_prob)
    if not 0.0 < p0 < 1.0:
        raise DataError("zero_prob must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    quota = np.full(n_classes, n // n_classes)
    quota[: n % n_classes] += 1
    accepted: List[Tuple[np.ndarray, int]] = []
    attempts = 0
    chunk = max(256, n)
    while len(accepted) < n:
        if attempts >= 100 * n:
            raise DataError(f"class balancing did not finish within {100 * n} draws "
                            f"(remaining quota {quota.tolist()})")
        size = min(chunk, 100 * n - attempts)
        lengths = rng.integers(seq_len_mean - seq_len_spread, max_len + 1, size=size)
        is_zero = rng.random((size, max_len)) < p0
        others = rng.integers(1, vocab, size=(size, max_len))
        tokens = np.where(is_zero, 0, others)
        for t, length in zip(tokens, lengths):
            attempts += 1
            seq = t[:length]
            label = min(int(np.count_nonzero(seq == 0)), n_classes - 1)
            if quota[label] > 0:
                quota[label] -= 1
                accepted.append((seq, label))
                if len(accepted) == n:
                    break
    eye = np.eye(vocab, dtype=np.uint8)
    return [SupervisedSample(eye[seq], label) for seq, label in accepted]


def count_label(tokens: Sequence[int], n_classes: int) -> int:
    return min(sum(1 for t in tokens if t == 0), n_classes - 1)


def sequence_tokens(sample: SupervisedSample) -> Optional[np.ndarray]:
    """Token ids if every step is a one-hot row, else ``None``."""
    seq = sample.sequence
    if np.all((seq == 0) | (seq == 1)) and np.all(seq.sum(axis=1) == 1):
        return np.argmax(seq, axis=1)
    return None


# --------------------------------------------------------------------------
# supervised -> bandit

def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one action per row; zero-probability actions are
    never returned."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.count_nonzero(cum <= u[:, None], axis=1).astype(np.int64)


def convert_to_bandit(supervised: Sequence[SupervisedSample], featurizer: "Featurizer", logging_policy,
                      seed: int, group_ids: Sequence[str] | None = None) -> Tuple[LoggedDataset, np.ndarray]:
    """Replay a supervised set through a stochastic logging policy.

    Returns the logged dataset (loss 0 iff the drawn action is the label) and
    the ground-truth labels as a separate array.
    """
    x = featurizer.transform(supervised)
    if x.shape[1] != logging_policy.input_dim:
        raise DataError(f"logging policy expects {logging_policy.input_dim} features, "
                        f"featurizer produces {x.shape[1]}")
    probs = logging_policy.predict_proba(x)
    if not np.all(np.isfinite(probs)):
        raise DataError("logging policy produced non-finite probabilities")
    labels = np.array([s.label for s in supervised], dtype=np.int64)
    if labels.max() >= logging_policy.n_actions:
        raise DataError("labels exceed the logging policy's action set")
    actions = sample_actions(probs, np.random.default_rng(seed))
    dataset = LoggedDataset(
        features=x,
        actions=actions,
        losses=(actions != labels).astype(float),
        n_actions=logging_policy.n_actions,
        propensities=probs[np.arange(len(actions)), actions],
        group_ids=None if group_ids is None else tuple(group_ids),
    )
    return dataset, labels


# --------------------------------------------------------------------------
# splitting

def split_indices(keys: Sequence[str], test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Group-aware shuffle split of sample indices by their group keys."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    unique = sorted(set(keys))
    if len(unique) < 2:
        raise DataError("cannot split: every sample belongs to a single group")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    n_test = int(round(test_fraction * len(unique)))
    n_test = min(max(n_test, 1), len(unique) - 1)
    test_groups = {unique[j] for j in order[:n_test]}
    is_test = np.array([k in test_groups for k in keys])
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def group_split(dataset: LoggedDataset, test_fraction: float, seed: int) -> Tuple[LoggedDataset, LoggedDataset]:
    train, test = split_indices(dataset.group_keys(), test_fraction, seed)
    return dataset.subset(train), dataset.subset(test)


# --------------------------------------------------------------------------
# exact enumeration

def enumerate_logged_outcomes(env: ToyEnvironment, logging_policy) -> Tuple[LoggedDataset, np.ndarray]:
    """Every (context, action) outcome with weight ``P(x) * P(a|x)``.

    The returned dataset carries the logging probability as its propensity,
    so weighted estimator means are exact expectations under logging.
    """
    n_ctx, k = env.loss_table.shape
    if n_ctx * k > 10_000:
        raise DataError("environment too large to enumerate (limit 10^4 pairs)")
    probs = logging_policy.predict_proba(env.context_features)
    weights = (env.context_probs[:, None] * probs).ravel()
    if np.any(weights < 1e-300):
        raise DataError("outcome weight underflows 1e-300")
    ctx = np.repeat(np.arange(n_ctx), k)
    act = np.tile(np.arange(k), n_ctx)
    dataset = LoggedDataset(
        features=env.context_features[ctx],
        actions=act,
        losses=env.loss_table[ctx, act],
        n_actions=k,
        propensities=probs[ctx, act],
        group_ids=tuple(str(c) for c in ctx),
    )
    return dataset, weights
