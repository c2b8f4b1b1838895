import json
from pathlib import Path

import pytest

from passportnet.cli import main

COMMON = ["--dataset", "synthetic", "--train-size", "512", "--test-size", "128"]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dry_run_validates_config(tmp_path, capsys):
    code, out, _ = run(
        ["train", "--dry-run", "--epochs", "3", "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["status"] == "ok"
    assert payload["passport_layers"] == ["conv2", "conv3"]
    assert not list(tmp_path.iterdir())  # dry run writes nothing


def test_usage_errors_exit_1(capsys):
    assert run(["trian"], capsys)[0] == 1
    assert run(["attack", "--kind", "nonsense", "--model", "x"], capsys)[0] == 1
    assert run([], capsys)[0] == 1


def test_invalid_scheme_config_exits_2(tmp_path, capsys):
    code, _, err = run(
        ["train", "--scheme", "v1", "--epochs", "-3", "--runs-dir", str(tmp_path)]
        + COMMON,
        capsys,
    )
    assert code == 2
    assert "error" in err


def test_config_file_defaults_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("epochs = 2\nsignature-text = cfg\n# comment\nseed = 7\n")
    code, out, _ = run(
        ["train", "--dry-run", "--config", str(cfg), "--epochs", "4",
         "--runs-dir", str(tmp_path / "runs")] + COMMON,
        capsys,
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["config"]["epochs"] == 4  # flag wins
    assert payload["config"]["seed"] == 7  # file provides default

    cfg.write_text("not_a_known_key = 1\n")
    code, _, err = run(["train", "--dry-run", "--config", str(cfg)] + COMMON, capsys)
    assert code == 1
    assert "not_a_known_key" in err

    cfg.write_text("epochs gültig\n")
    assert run(["train", "--dry-run", "--config", str(cfg)] + COMMON, capsys)[0] == 1


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    runs = tmp_path_factory.mktemp("runs")
    code = main(
        ["train", "--scheme", "v1", "--epochs", "6", "--seed", "0",
         "--signature-text", "cli", "--runs-dir", str(runs)] + COMMON
    )
    assert code == 0
    run_dir = next(p for p in runs.iterdir() if p.is_dir())
    return runs, run_dir


def test_train_writes_artifacts_and_record(trained_run):
    _, run_dir = trained_run
    assert (run_dir / "checkpoint.ppnc").exists()
    assert (run_dir / "passports.ppnc").exists()
    record = json.loads((run_dir / "record.json").read_text())
    assert record["command"] == "train"
    assert "valid_accuracy" in record["metrics"]
    assert record["versions"]["passportnet"]


def test_verify_owned_and_exit_codes(trained_run, tmp_path, capsys):
    runs, run_dir = trained_run
    code, out, _ = run(
        ["verify", "--model", str(run_dir / "checkpoint.ppnc"),
         "--passports", str(run_dir / "passports.ppnc"),
         "--runs-dir", str(tmp_path), "--out", str(tmp_path / "report.json")]
        + COMMON,
        capsys,
    )
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] in ("owned", "not-owned")
    assert code == (0 if report["verdict"] == "owned" else 3)
    assert json.loads(out)["verdict"] == report["verdict"]


def test_verify_not_owned_with_wrong_passports(trained_run, tmp_path, capsys):
    import torch

    from passportnet.passports import gen_random_set, save_passports
    from passportnet.signatures import encode_signature
    from passportnet.training import load_checkpoint

    _, run_dir = trained_run
    model, _ = load_checkpoint(run_dir / "checkpoint.ppnc")
    fake = gen_random_set(model, seed=999)
    sig = encode_signature("cli", model.passport_capacities(), seed=0)
    fake_path = tmp_path / "fake.ppnc"
    save_passports(fake, fake_path, signature=sig)
    code, _, _ = run(
        ["verify", "--model", str(run_dir / "checkpoint.ppnc"),
         "--passports", str(fake_path), "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 3


def test_verify_fingerprint_mismatch_exits_2(trained_run, tmp_path, capsys):
    from passportnet.models import build_model
    from passportnet.passports import gen_random_set, save_passports

    _, run_dir = trained_run
    other = build_model("alexnet_p", "v1", seed=0)
    path = tmp_path / "other.ppnc"
    save_passports(gen_random_set(other, seed=0), path)
    code, _, err = run(
        ["verify", "--model", str(run_dir / "checkpoint.ppnc"),
         "--passports", str(path), "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 2
    assert "fingerprint" in err


def test_attack_prune_smoke(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    code, out, _ = run(
        ["attack", "--kind", "prune", "--model", str(run_dir / "checkpoint.ppnc"),
         "--passports", str(run_dir / "passports.ppnc"), "--rate", "0.5",
         "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["metrics"]["rate"] == 0.5
    assert "accuracy" in payload["metrics"]


def test_attack_flip_signs_smoke(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    code, out, _ = run(
        ["attack", "--kind", "flip-signs", "--model", str(run_dir / "checkpoint.ppnc"),
         "--passports", str(run_dir / "passports.ppnc"), "--flip-fraction", "0.5",
         "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 0
    assert "accuracy" in json.loads(out)["metrics"]


def test_attack_requires_passports_when_needed(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    code, _, err = run(
        ["attack", "--kind", "insider", "--model", str(run_dir / "checkpoint.ppnc"),
         "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 2
    assert "passports" in err


def test_probe_smoke(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    code, out, _ = run(
        ["probe", "--model", str(run_dir / "checkpoint.ppnc"), "--n-fake", "2",
         "--runs-dir", str(tmp_path)] + COMMON,
        capsys,
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["n_fake"] == 2
    assert len(payload["accuracies"]) == 2


def test_report_empty_dir_ok(tmp_path, capsys):
    code, out, _ = run(
        ["report", "--runs-dir", str(tmp_path / "none"), "--out", str(tmp_path / "rep")],
        capsys,
    )
    assert code == 0
    assert json.loads(out)["records"] == 0
    assert (tmp_path / "rep" / "summary.md").exists()


def test_report_renders_runs(trained_run, tmp_path, capsys):
    runs, _ = trained_run
    code, out, _ = run(
        ["report", "--runs-dir", str(runs), "--out", str(tmp_path / "rep")], capsys
    )
    assert code == 0
    summary = (tmp_path / "rep" / "summary.md").read_text()
    assert "train" in summary


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
