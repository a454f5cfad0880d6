import json

import numpy as np
import pytest

from blbf.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, load_model, main, parse_args, read_supervised
from blbf.data import load_logged_csv
from blbf.document import as_floats, parse
from blbf.policy import SoftmaxPolicy
from conftest import cli_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return cli_pipeline(tmp_path_factory.mktemp("pipeline"))


def read_doc(path):
    return parse(path.read_text())


# ---------------------------------------------------------------- generate

def test_generate_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["generate", "--n", "60", "--seed", "9", "--out", str(tmp_path / name)]) == 0
    for f in ("supervised.txt", "labels.txt", "generate_summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "class histogram: 0:" in capsys.readouterr().out


def test_generate_round_trips_samples(tmp_path):
    main(["generate", "--n", "30", "--vocab", "12", "--seed", "1", "--out", str(tmp_path)])
    samples = read_supervised(tmp_path / "supervised.txt", tmp_path / "labels.txt")
    assert len(samples) == 30 and samples[0].sequence.shape[1] == 12
    assert [s.label for s in samples] == [int(v) for v in (tmp_path / "labels.txt").read_text().split()]


def test_generate_rejects_zero_samples(tmp_path, capsys):
    assert main(["generate", "--n", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert not (tmp_path / "supervised.txt").exists()


def test_idx_task_needs_files(tmp_path):
    assert main(["generate", "--task", "idx", "--out", str(tmp_path)]) == EXIT_USAGE


# ---------------------------------------------------------------- pipeline

def test_fit_logging_lands_in_band(pipeline):
    doc = read_doc(pipeline["fit-logging"] / "logging_policy.txt")
    assert 0.60 <= float(doc["logging"]["heldout_accuracy"]) <= 0.72
    policy, featurizer, _ = load_model(pipeline["fit-logging"] / "logging_policy.txt")
    assert isinstance(policy, SoftmaxPolicy) and featurizer is not None


def test_conversion_summary_matches_logged_data(pipeline):
    summary = read_doc(pipeline["convert"] / "conversion_summary.txt")["summary"]
    data = load_logged_csv(pipeline["convert"] / "logged.csv")
    assert len(data) == 9500
    assert np.all((data.propensities > 0) & (data.propensities <= 1))
    mean_loss = float(summary["mean_loss"])
    assert mean_loss == data.losses.mean()
    # losses are 0/1 label mismatches; the greedy accuracy and the sampled loss agree loosely
    assert abs(mean_loss - (1 - float(summary["logging_accuracy"]))) < 0.1
    assert as_floats(summary["action_histogram"]).sum() == len(data)


def test_split_keeps_groups_apart(pipeline):
    train = load_logged_csv(pipeline["split"] / "train.csv")
    test = load_logged_csv(pipeline["split"] / "test.csv")
    assert not set(train.group_ids) & set(test.group_ids)
    assert len(train) + len(test) == 9500


def test_etips_audit(pipeline):
    audit = read_doc(pipeline["train"] / "audit.txt")
    assert int(audit["training"]["n_candidates"]) == 9
    snips = [float(audit[f"candidate.{j}"]["snips"]) for j in range(9)
             if audit[f"candidate.{j}"]["flagged"] == "false"]
    winner = audit[f"candidate.{audit['training']['winner']}"]
    assert float(winner["snips"]) == min(snips)
    assert audit["training"]["propensities"] == "estimated"
    assert len({audit[f"candidate.{j}"]["seed"] for j in range(9)}) == 9


def test_evaluate_report_rows(pipeline, capsys):
    report = read_doc(pipeline["evaluate"] / "evaluation_report.txt")
    for name in ("propensity", "policy", "RP", "DM"):
        assert f"policy.{name}" in report
    assert report["policy.DM"]["ips"] == "NA" and report["policy.DM"]["tmf"] == "NA"
    assert abs(float(report["policy.propensity"]["tmf"]) - 1.0) < 0.1
    assert float(report["policy.policy"]["atenp"]) < 0


def test_evaluate_detects_leakage(pipeline, tmp_path, capsys):
    code = main(["evaluate", "--data", str(pipeline["split"] / "train.csv"), "--train-dir", str(pipeline["train"]),
                 "--out", str(tmp_path)])
    assert code == EXIT_DATA
    assert "leakage" in capsys.readouterr().err


def test_evaluate_extra_policy_and_soft_dm(pipeline, tmp_path):
    code = main(["evaluate", "--data", str(pipeline["split"] / "test.csv"), "--train-dir", str(pipeline["train"]),
                 "--policy", f"again={pipeline['train'] / 'policy.txt'}", "--soft-dm-temperature", "0.1",
                 "--out", str(tmp_path)])
    assert code == 0
    report = read_doc(tmp_path / "evaluation_report.txt")
    assert report["policy.again"] == report["policy.policy"]
    assert report["policy.DM-soft"]["tmf"] != "NA"


def test_train_ips_reports_verdict(pipeline, tmp_path, capsys):
    code = main(["train", "--data", str(pipeline["split"] / "train.csv"), "--method", "ips", "--epochs", "2",
                 "--out", str(tmp_path)])
    assert code == 0
    audit = read_doc(tmp_path / "audit.txt")
    assert int(audit["training"]["n_candidates"]) == 1
    assert audit["candidate.0"]["verdict"] in ("healthy", "suspicious", "overfit")
    assert audit["training"]["propensities"] == "logged"


def test_missing_propensities_suggest_estimated_mode(pipeline, tmp_path, capsys):
    data = load_logged_csv(pipeline["split"] / "test.csv")
    lines = (pipeline["split"] / "test.csv").read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("propensity")
    stripped = "\n".join(",".join(c for j, c in enumerate(l.split(",")) if j != drop) for l in lines) + "\n"
    path = tmp_path / "noprop.csv"
    path.write_text(stripped)
    assert not load_logged_csv(path).has_propensities and len(data) > 0
    code = main(["train", "--data", str(path), "--method", "tips", "--propensities", "logged", "--epochs", "1",
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "--propensities estimated" in capsys.readouterr().err


def test_simulation_report(pipeline):
    doc = read_doc(pipeline["simulate"] / "simulation_report.txt")
    assert len(as_floats(doc["method.IPS"]["accuracy"])) == 2
    assert doc["method.RP"]["accuracy_std"] != "NA"


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_passes(pipeline, capsys):
    doc = read_doc(pipeline["gradcheck"] / "gradcheck.txt")
    assert doc["result"]["verdict"] == "PASS"


def test_gradcheck_catches_sign_flip(tmp_path, capsys):
    code = main(["gradcheck", "--instances", "3", "--mutate", "sign-flip", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    assert capsys.readouterr().out.startswith("FAIL max_rel_err=")


def test_gradcheck_warns_on_tiny_step(tmp_path, capsys):
    main(["gradcheck", "--instances", "2", "--step", "1e-12", "--out", str(tmp_path)])
    assert "warning" in capsys.readouterr().err


# ---------------------------------------------------------------- config handling

def test_config_file_sets_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 25, "vocab": 9, "seed": 3}))
    args = parse_args(["generate", "--config", str(cfg), "--n", "40"])
    assert (args.n, args.vocab, args.seed) == (40, 9, 3)


def test_config_lists_and_grid(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda_grid": [0.2, 0.4], "epochs": 2}))
    args = parse_args(["train", "--data", "x.csv", "--config", str(cfg)])
    assert args.lambda_grid == (0.2, 0.4) and args.epochs == 2
    assert parse_args(["train", "--data", "x", "--lambda-grid", "0.25:0.75:0.25"]).lambda_grid == (0.25, 0.5, 0.75)


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "bogus" in capsys.readouterr().err


def test_config_digest_ignores_output_location(tmp_path):
    for name in ("a", "b"):
        main(["generate", "--n", "20", "--seed", "2", "--out", str(tmp_path / name)])
    digests = {read_doc(tmp_path / n / "generate_summary.txt")[""]["config_digest"] for n in ("a", "b")}
    assert len(digests) == 1
