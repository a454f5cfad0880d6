"""Command-line pipelines: generate, fit-logging, convert, split, train,
evaluate, gradcheck and simulate.

Every command is a pure function of its flags, config file, input files and
seed. Output documents embed the digest of the resolved configuration and the
toolkit version and are written atomically.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from blbf import __version__
from blbf._numeric import derive_seed
from blbf.data import (DataError, LoggedDataset, SupervisedSample, convert_to_bandit, format_logged_csv,
                       generate_counting_task, group_split, load_idx_pair, load_logged_csv, sequence_tokens)
from blbf.document import as_floats, as_ints, format_value, parse, render, write_atomic
from blbf.estimators import NoOverlapError, accuracy_from_features
from blbf.evaluation import (METHODS, SyntheticTaskSpec, dataset_digest, diagnose_overfit, evaluate_offline,
                             run_simulation_study)
from blbf.optim import DivergenceError, TrainConfig
from blbf.policy import (LOGGING_CONFIG, BandError, DirectMethodPolicy, Featurizer, FixedPolicy, LossModel,
                         PolicyShape, SoftmaxPolicy, baseline_policy, estimate_propensities,
                         train_logging_policy, train_loss_model, train_supervised)
from blbf.training import (AllRunsFlaggedError, TrainRun, etips_train, finite_difference_check, tips_grid,
                           tips_objective_and_gradient, train_tips)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# keys excluded from the config digest: they locate files, they do not change results
_LOCATION_KEYS = {"config", "out", "command"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# supervised data files

def format_supervised(samples: Sequence[SupervisedSample], encoding: str) -> str:
    """One line per sample: token ids, or ``T`` followed by T*width bytes."""
    if not samples:
        raise DataError("no samples")
    width = samples[0].sequence.shape[1]
    lines = []
    for i, s in enumerate(samples):
        if s.static_features.size:
            raise DataError("static features cannot be stored in a supervised file")
        if encoding == "tokens":
            tok = sequence_tokens(s)
            if tok is None:
                raise DataError(f"sample {i} is not a one-hot token sequence")
            lines.append(" ".join(str(int(t)) for t in tok))
        elif encoding == "uint8-rows":
            q = np.rint(np.asarray(s.sequence) * 255.0).astype(np.int64)
            lines.append(f"{q.shape[0]} " + " ".join(str(int(v)) for v in q.ravel()))
        else:
            raise ValueError(f"unknown encoding {encoding!r}")
    head = f"# blbf supervised\n# encoding = {encoding}\n# width = {width}\n# version = {__version__}\n"
    return head + "\n".join(lines) + "\n"


def read_supervised(data_path: Path, labels_path: Path) -> List[SupervisedSample]:
    text = Path(data_path).read_text(encoding="utf-8").splitlines()
    header = {}
    body = []
    for lineno, line in enumerate(text, start=1):
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
        elif line.strip():
            body.append((lineno, line))
    try:
        encoding, width = header["encoding"], int(header["width"])
    except (KeyError, ValueError):
        raise DataError(f"{data_path}: missing encoding/width header")
    labels = [int(v) for v in Path(labels_path).read_text(encoding="utf-8").split()]
    if len(labels) != len(body):
        raise DataError(f"{len(body)} samples but {len(labels)} labels")
    eye = np.eye(width, dtype=np.uint8)
    out = []
    for (lineno, line), label in zip(body, labels):
        try:
            values = [int(v) for v in line.split()]
            if encoding == "tokens":
                seq = eye[np.asarray(values)]
            elif encoding == "uint8-rows":
                t = values[0]
                seq = np.asarray(values[1:], dtype=float).reshape(t, width) / 255.0
            else:
                raise DataError(f"unknown encoding {encoding!r}")
            out.append(SupervisedSample(seq, label))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{data_path}:{lineno}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# model files

def _featurizer_section(f: Featurizer) -> Dict[str, object]:
    return {"mode": f.mode, "token_width": f.token_width, "static_width": f.static_width,
            "center": f.center, "scale": f.scale}


def _read_featurizer(sec: Dict[str, str]) -> Featurizer:
    center = None if sec["center"] == "NA" else as_floats(sec["center"])
    scale = None if sec["scale"] == "NA" else as_floats(sec["scale"])
    return Featurizer(sec["mode"], int(sec["token_width"]), int(sec["static_width"]), center, scale)


def model_document(model, config: Dict, featurizer: Featurizer | None = None,
                   extra: Dict[str, Dict[str, object]] | None = None) -> str:
    if isinstance(model, SoftmaxPolicy):
        sec = {"type": "softmax", "input_dim": model.input_dim, "n_actions": model.n_actions,
               "hidden": model.hidden, "seed": model.meta.get("seed"), "params": model.params}
    elif isinstance(model, LossModel):
        sec = {"type": "loss-model", "input_dim": model.feature_dim, "n_actions": model.n_actions,
               "hidden": model.hidden, "low": model.low, "high": model.high, "seed": model.meta.get("seed"),
               "params": model.params}
    elif isinstance(model, DirectMethodPolicy):
        lm = model.loss_model
        sec = {"type": "direct-method", "input_dim": lm.feature_dim, "n_actions": lm.n_actions,
               "hidden": lm.hidden, "low": lm.low, "high": lm.high, "params": lm.params}
    elif isinstance(model, FixedPolicy):
        sec = {"type": "fixed", "name": model.name, "input_dim": model.input_dim, "probs": model.probs,
               "deterministic": model.deterministic}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    sections: Dict[str, Dict[str, object]] = {"model": sec}
    if featurizer is not None:
        sections["featurizer"] = _featurizer_section(featurizer)
    sections.update(extra or {})
    return render("model", sections, config)


def load_model(path) -> Tuple[object, Featurizer | None, Dict[str, Dict[str, str]]]:
    doc = parse(Path(path).read_text(encoding="utf-8"))
    if doc[""].get("kind") != "model":
        raise DataError(f"{path} is not a model document")
    sec = doc["model"]
    kind = sec["type"]
    meta = {} if sec.get("seed", "NA") == "NA" else {"seed": int(sec["seed"])}
    if kind == "softmax":
        model = SoftmaxPolicy(int(sec["input_dim"]), int(sec["n_actions"]), int(sec["hidden"]),
                              as_floats(sec["params"]), meta)
    elif kind in ("loss-model", "direct-method"):
        model = LossModel(int(sec["input_dim"]), int(sec["n_actions"]), int(sec["hidden"]),
                          as_floats(sec["params"]), float(sec["low"]), float(sec["high"]), meta)
        if kind == "direct-method":
            model = DirectMethodPolicy(model)
    elif kind == "fixed":
        dim = None if sec["input_dim"] == "NA" else int(sec["input_dim"])
        model = FixedPolicy(as_floats(sec["probs"]), sec["deterministic"] == "true", dim, sec["name"])
    else:
        raise DataError(f"{path}: unknown model type {kind!r}")
    featurizer = _read_featurizer(doc["featurizer"]) if "featurizer" in doc else None
    return model, featurizer, doc


# --------------------------------------------------------------------------
# argument handling

def _lambda_grid(text: str) -> Tuple[float, ...]:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected start:stop:step") from None
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("need step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + i * step, 12) for i in range(n))


def _band(text: str) -> Tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected lo:hi") from None
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys mirror the flags; flags override it")
    p.add_argument("--out", default=".", help="output directory")


def _add_training(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--hidden", type=int, default=PolicyShape().hidden, help="hidden units (0 = linear)")
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    p.add_argument("--epochs", type=_positive_int, default=d.epochs)
    p.add_argument("--propensity-floor", type=float, default=d.propensity_floor)
    p.add_argument("--lambda-grid", type=_lambda_grid, default=d.lambda_grid,
                   help="translation grid start:stop:step on the [0, 1] loss scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blbf", description="Batch learning from logged bandit feedback.")
    parser.add_argument("--version", action="version", version=f"blbf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a supervised task and its labels")
    _add_common(p)
    p.add_argument("--task", choices=("counting", "idx"), default="counting")
    p.add_argument("--n", type=_positive_int, default=10_000)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--seq-len-mean", type=int, default=20)
    p.add_argument("--seq-len-spread", type=int, default=5)
    p.add_argument("--zero-prob", type=float, default=None)
    p.add_argument("--images", help="IDX image file (task idx)")
    p.add_argument("--labels", help="IDX label file (task idx)")

    p = sub.add_parser("fit-logging", help="train a mediocre logging policy on a small subset")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory written by generate")
    p.add_argument("--featurizer", choices=("mean-pool", "last-step"), default="mean-pool")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--subset-fraction", type=_fraction, default=0.05)
    p.add_argument("--band", type=_band, default=(0.60, 0.72))
    p.add_argument("--hidden", type=int, default=PolicyShape().hidden)

    p = sub.add_parser("convert", help="replay supervised data through the logging policy")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory written by generate")
    p.add_argument("--logging-policy", required=True)
    p.add_argument("--include-logging-subset", action="store_true",
                   help="also convert the samples the logging policy was trained on")

    p = sub.add_parser("split", help="group-aware train/test split of a logged CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=_fraction, default=0.2)

    p = sub.add_parser("train", help="learn a policy from a logged CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("dm", "rp", "ips", "tips", "eips", "etips"), default="etips")
    p.add_argument("--propensities", choices=("logged", "estimated"), default=None,
                   help="default: logged for ips/tips, estimated for eips/etips")
    p.add_argument("--selection", choices=("train", "holdout"), default="train")
    _add_training(p)

    p = sub.add_parser("evaluate", help="offline report on a held-out logged CSV")
    _add_common(p)
    p.add_argument("--data", required=True, help="held-out logged CSV")
    p.add_argument("--train-dir", required=True, help="directory written by train")
    p.add_argument("--policy", action="append", default=[], metavar="NAME=PATH",
                   help="extra policy model to evaluate (repeatable)")
    p.add_argument("--soft-dm-temperature", type=float, default=None,
                   help="also score DM as softmax(-loss/T) with IPS and DR")

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    _add_common(p)
    p.add_argument("--instances", type=_positive_int, default=100)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--mutate", choices=("none", "sign-flip"), default="none",
                   help="test mode: corrupt the analytic gradient to confirm failures are caught")

    p = sub.add_parser("simulate", help="repeated supervised-to-bandit simulation study")
    _add_common(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--n", type=_positive_int, default=10_000)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--featurizer", choices=("mean-pool", "last-step"), default="mean-pool")
    _add_training(p)
    return parser


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config must be a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in _LOCATION_KEYS:
                parser.error(f"unknown config key {key!r} for {args.command}")
            action = known[dest]
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            elif dest == "lambda_grid":
                value = tuple(float(v) for v in value)
            elif dest == "band":
                value = tuple(float(v) for v in value)
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def resolved_config(args: argparse.Namespace) -> Dict[str, object]:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _LOCATION_KEYS}
    cfg["command"] = args.command
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.learning_rate, momentum=args.momentum, batch_size=args.batch_size,
                       epochs=args.epochs, seed=derive_seed(args.seed, 0),
                       lambda_grid=tuple(args.lambda_grid), propensity_floor=args.propensity_floor)


# --------------------------------------------------------------------------
# commands

def cmd_generate(args, cfg) -> int:
    out = Path(args.out)
    if args.task == "counting":
        samples = generate_counting_task(args.n, args.n_classes, args.vocab, args.seq_len_mean,
                                         args.seq_len_spread, args.seed, args.zero_prob)
        encoding = "tokens"
    else:
        if not (args.images and args.labels):
            raise UsageError("task idx needs --images and --labels")
        samples = load_idx_pair(args.images, args.labels)
        encoding = "uint8-rows"
    labels = np.array([s.label for s in samples])
    write_atomic(out / "supervised.txt", format_supervised(samples, encoding))
    write_atomic(out / "labels.txt", "\n".join(str(int(v)) for v in labels) + "\n")
    hist = np.bincount(labels)
    write_atomic(out / "generate_summary.txt", render("generate-summary", {"summary": {
        "n": len(samples), "encoding": encoding, "class_histogram": hist}}, cfg))
    print("class histogram: " + " ".join(f"{k}:{int(c)}" for k, c in enumerate(hist)))
    return EXIT_OK


def _load_supervised_dir(path) -> List[SupervisedSample]:
    d = Path(path)
    return read_supervised(d / "supervised.txt", d / "labels.txt")


def cmd_fit_logging(args, cfg) -> int:
    samples = _load_supervised_dir(args.data)
    width = samples[0].sequence.shape[1]
    featurizer = Featurizer(args.featurizer, width)
    if not args.no_standardize:
        featurizer = featurizer.fit_standardizer(samples)
    policy, subset = train_logging_policy(samples, featurizer, args.subset_fraction, args.band,
                                          args.seed, PolicyShape(hidden=args.hidden), LOGGING_CONFIG)
    extra = {"logging": {"heldout_accuracy": policy.meta["heldout_accuracy"],
                         "checkpoint_epoch": policy.meta["checkpoint_epoch"],
                         "subset_indices": subset}}
    write_atomic(Path(args.out) / "logging_policy.txt", model_document(policy, cfg, featurizer, extra))
    print(f"logging policy: held-out accuracy {policy.meta['heldout_accuracy']:.4f} "
          f"at epoch {policy.meta['checkpoint_epoch']}")
    return EXIT_OK


def cmd_convert(args, cfg) -> int:
    samples = _load_supervised_dir(args.data)
    policy, featurizer, doc = load_model(args.logging_policy)
    if featurizer is None or not isinstance(policy, SoftmaxPolicy):
        raise DataError("logging policy file must hold a softmax policy with a featurizer")
    if featurizer.token_width != samples[0].sequence.shape[1]:
        raise DataError(f"logging policy expects token width {featurizer.token_width}, "
                        f"data has {samples[0].sequence.shape[1]}")
    index = np.arange(len(samples))
    if not args.include_logging_subset and "logging" in doc:
        index = np.setdiff1d(index, as_ints(doc["logging"]["subset_indices"]))
    chosen = [samples[i] for i in index]
    groups = [f"s{i}" for i in index]
    logged, labels = convert_to_bandit(chosen, featurizer, policy, args.seed, group_ids=groups)
    out = Path(args.out)
    write_atomic(out / "logged.csv", format_logged_csv(logged))
    write_atomic(out / "logged_labels.txt", "\n".join(str(int(v)) for v in labels) + "\n")
    mean_loss = float(logged.losses.mean())
    hist = np.bincount(logged.actions, minlength=logged.n_actions)
    write_atomic(out / "conversion_summary.txt", render("conversion-summary", {"summary": {
        "m": len(logged), "mean_loss": mean_loss,
        "logging_accuracy": accuracy_from_features(policy, logged.features, labels),
        "action_histogram": hist, "label_histogram": np.bincount(labels, minlength=logged.n_actions)}}, cfg))
    print(f"converted {len(logged)} samples: mean loss {mean_loss:.4f}, actions "
          + " ".join(f"{k}:{int(c)}" for k, c in enumerate(hist)))
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    data = load_logged_csv(args.data)
    train, test = group_split(data, args.test_fraction, args.seed)
    out = Path(args.out)
    write_atomic(out / "train.csv", format_logged_csv(train))
    write_atomic(out / "test.csv", format_logged_csv(test))
    print(f"train {len(train)} / test {len(test)}")
    return EXIT_OK


def _run_section(run: TrainRun, lam_unit: float) -> Dict[str, object]:
    return {"lambda": run.lam, "lambda_unit": lam_unit, "seed": run.seed, "tmf": run.s, "snips": run.snips,
            "ips": run.ips, "flagged": run.flagged, "verdict": diagnose_overfit(run), "loss_trace": run.trace}


def cmd_train(args, cfg) -> int:
    data = load_logged_csv(args.data)
    config = _train_config(args)
    shape = PolicyShape(hidden=args.hidden)
    method = args.method
    mode = args.propensities or ("estimated" if method in ("eips", "etips") else "logged")
    if method in ("ips", "tips", "eips", "etips") and mode == "logged" and not data.has_propensities:
        raise DataError("the logged CSV has no propensity column; rerun with --propensities estimated")
    out = Path(args.out)

    prop_model = train_supervised(data.features, data.actions, data.n_actions, shape,
                                  config.replace(seed=derive_seed(args.seed, 1)))
    loss_model = train_loss_model(data, shape, config.replace(seed=derive_seed(args.seed, 2)))
    write_atomic(out / "propensity_model.txt", model_document(prop_model, cfg))
    write_atomic(out / "loss_model.txt", model_document(loss_model, cfg))
    write_atomic(out / "train_manifest.txt", "\n".join(data.group_keys()) + "\n")

    audit: Dict[str, Dict[str, object]] = {"training": {
        "method": method, "propensities": mode, "m": len(data), "train_sha256": dataset_digest(data)}}
    if method == "dm":
        policy = DirectMethodPolicy(loss_model)
    elif method == "rp":
        policy = baseline_policy("random", data)
    else:
        if mode == "logged":
            p = data.propensities
        else:
            p, clipped = estimate_propensities(prop_model, data, config.propensity_floor)
            audit["training"]["clipped_count"] = clipped
        if method in ("ips", "eips"):
            runs, best = [train_tips(data, p, 0.0, shape, config)], 0
            units = [0.0]
        else:
            if method == "etips" and mode == "estimated":
                res = etips_train(data, shape=shape, config=config, selection=args.selection,
                                  propensity_model=prop_model)
                runs, best = res.runs, res.best_index
            else:
                grid = tips_grid(data, p, shape, config, selection=args.selection)
                runs, best = grid.runs, grid.best_index
            units = list(config.lambda_grid)
        policy = runs[best].policy
        audit["training"].update(n_candidates=len(runs), winner=best, winner_tmf=runs[best].s,
                                 winner_verdict=diagnose_overfit(runs[best]))
        for j, (run, u) in enumerate(zip(runs, units)):
            audit[f"candidate.{j}"] = _run_section(run, u)
    write_atomic(out / "policy.txt", model_document(policy, cfg))
    write_atomic(out / "audit.txt", render("train-audit", audit, cfg))
    t = audit["training"]
    if "winner_tmf" in t:
        print(f"{method}: {t['n_candidates']} candidate(s), winner {t['winner']} "
              f"TMF {t['winner_tmf']:.4f} ({t['winner_verdict']})")
    else:
        print(f"{method}: trained")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    test = load_logged_csv(args.data)
    tdir = Path(args.train_dir)
    manifest = tdir / "train_manifest.txt"
    if manifest.exists():
        train_groups = set(manifest.read_text(encoding="utf-8").split())
        shared = sorted(train_groups.intersection(test.group_keys()))
        if shared:
            raise DataError(f"group leakage: {len(shared)} group id(s) appear in both the training manifest "
                            f"and the test set (e.g. {shared[0]})")
    prop_model = load_model(tdir / "propensity_model.txt")[0]
    loss_model = load_model(tdir / "loss_model.txt")[0]
    policies = [("propensity", prop_model), ("policy", load_model(tdir / "policy.txt")[0]),
                ("RP", baseline_policy("random", test)), ("DM", DirectMethodPolicy(loss_model))]
    if args.soft_dm_temperature is not None:
        policies.append(("DM-soft", DirectMethodPolicy(loss_model, args.soft_dm_temperature)))
    for spec in args.policy:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise UsageError(f"--policy expects NAME=PATH, got {spec!r}")
        policies.append((name, load_model(path)[0]))
    report = evaluate_offline(test, policies, prop_model, loss_model)
    write_atomic(Path(args.out) / "evaluation_report.txt", report.to_document(cfg))
    print(report.to_table(), end="")
    return EXIT_OK


def _gradcheck_instance(rng: np.random.Generator, k: int):
    n = int(rng.integers(5, 30))
    d = int(rng.integers(2, 6))
    n_act = int(rng.integers(2, 5))
    hidden = 0 if k % 2 == 0 else int(rng.integers(2, 8))
    lam = (0.0, 0.5, 0.9)[k % 3]
    x = rng.normal(size=(n, d))
    actions = rng.integers(0, n_act, size=n)
    losses = rng.integers(0, 2, size=n).astype(float)
    p = rng.uniform(0.05, 1.0, size=n)
    data = LoggedDataset(x, actions, losses, n_act, p)
    policy = SoftmaxPolicy.initialize(d, n_act, PolicyShape(hidden=hidden, init_scale=0.5),
                                      int(rng.integers(2**31)))
    return policy, data, lam


def cmd_gradcheck(args, cfg) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for k in range(args.instances):
        policy, data, lam = _gradcheck_instance(rng, k)
        sign = -1.0 if args.mutate == "sign-flip" else 1.0

        def objective(params, policy=policy, data=data, lam=lam):
            val, grad = tips_objective_and_gradient(policy, data, data.propensities, lam, params)
            return val, sign * grad

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            err = finite_difference_check(policy, step=args.step, objective=objective, seed=k)
        for w in caught:
            if k == 0:
                print(f"warning: {w.message}", file=sys.stderr)
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    verdict = "PASS" if worst < args.tolerance else "FAIL"
    write_atomic(Path(args.out) / "gradcheck.txt", render("gradcheck", {"result": {
        "verdict": verdict, "max_rel_err": worst, "instances": args.instances}}, cfg))
    print(f"{verdict} max_rel_err={format_value(worst)}")
    return EXIT_OK if verdict == "PASS" else EXIT_NUMERIC


def cmd_simulate(args, cfg) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}; choose from {', '.join(METHODS)}")
    if args.folds < 2:
        raise UsageError("--folds must be at least 2")
    task = SyntheticTaskSpec(n=args.n, vocab=args.vocab, featurizer_mode=args.featurizer,
                             shape=PolicyShape(hidden=args.hidden), train_config=_train_config(args))
    report = run_simulation_study(task, methods, args.folds, args.seed)
    write_atomic(Path(args.out) / "simulation_report.txt", report.to_document(cfg))
    print(report.to_table(), end="")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "fit-logging": cmd_fit_logging, "convert": cmd_convert, "split": cmd_split,
    "train": cmd_train, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "simulate": cmd_simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    cfg = resolved_config(args)
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, AllRunsFlaggedError, BandError, NoOverlapError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
