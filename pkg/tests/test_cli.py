import json

import numpy as np
import pytest

from tensorpoly.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, direction_checks, main
from tensorpoly.config import parse_overrides, parse_value
from tensorpoly.suite import read_summary

SMALL = ["--set", "d=8", "--set", "r=2", "--set", "R=2", "--set", "S=2", "--set", "layers=1", "--set", "G=3",
         "--set", "T_train=4", "--set", "T_test=2", "--set", "samples_per_task=30", "--set", "eval_samples=30",
         "--set", "shots=10", "--set", "pretrain_epochs=3", "--set", "adapt_epochs=3"]


def _table(out):
    lines = [l.split("\t") for l in out.strip().splitlines()]
    return dict(zip(lines[0], lines[1]))


@pytest.mark.parametrize("argv,params", [
    (["--method", "tlora-vector", "--d", "512", "--N", "3", "--R", "2"], "48"),
    (["--method", "tlora", "--d", "1024", "--r", "4", "--N", "2", "--R", "8"], "4096"),
    (["--method", "lora", "--d", "512", "--r", "4"], "4096"),
    (["--method", "tp2", "--phase", "pretrain", "--d", "512", "--r", "4", "--N", "2", "--R", "8", "--T", "10"], "3104"),
    (["--method", "poly", "--phase", "finetune", "--d", "8", "--r", "2", "--S", "4"], "132"),
])
def test_params_examples(argv, params, capsys):
    assert main(["params", *argv]) == EXIT_OK
    assert _table(capsys.readouterr().out)["params"] == params


def test_params_usage_errors(capsys):
    assert main(["params", "--method", "lora", "--d", "512"]) == EXIT_USAGE
    assert main(["params", "--method", "nope", "--d", "8", "--r", "1"]) == EXIT_USAGE
    assert main(["params", "--d", "8"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_flops(capsys):
    assert main(["flops", "--d", "625", "--r", "5", "--R", "3"]) == EXIT_OK
    assert capsys.readouterr().out.split()[-1] == "9375"


def test_gradcheck_and_oracle(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "all variants pass" in out
    assert main(["oracle", "--count", "24"]) == EXIT_OK
    assert "24/24" in capsys.readouterr().out


def test_verbose_flag_position(capsys):
    assert main(["-v", "flops", "--d", "4", "--r", "1", "--R", "1"]) == EXIT_OK
    assert main(["flops", "-v", "--d", "4", "--r", "1", "--R", "1"]) == EXIT_OK


def test_pretrain_adapt_roundtrip(tmp_path, capsys):
    ck = tmp_path / "tp1.tpck"
    met = tmp_path / "pre.jsonl"
    assert main(["pretrain", "--method", "tp1", *SMALL, "--out", str(ck), "--metrics", str(met)]) == EXIT_OK
    recs = [json.loads(l) for l in met.read_text().splitlines()]
    assert len(recs) == 3 * 4 and all(r["phase"] == "pretrain" for r in recs)  # epochs x train tasks
    capsys.readouterr()
    assert main(["adapt", "--checkpoint", str(ck), "--mode", "z-only", "--task", "1"]) == EXIT_OK
    row = _table(capsys.readouterr().out)
    assert row["trainable"] == "2" and row["mode"] == "z-only" and row["task_id"] == "5"
    assert main(["adapt", "--checkpoint", str(ck), "--task", "7"]) == EXIT_USAGE
    # metrics files are write-once
    assert main(["pretrain", *SMALL, "--out", str(ck), "--metrics", str(met)]) == EXIT_USAGE


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('method = "tp2"\nd = 8\nr = 1\nR = 2\nS = 2\nlayers = 1\nG = 3\nT_train = 3\nT_test = 1\n'
                   'samples_per_task = 20\neval_samples = 20\nshots = 5\npretrain_epochs = 2\nadapt_epochs = 1\n')
    out = tmp_path / "c.tpck"
    assert main(["pretrain", "--config", str(cfg), "--set", "seed=9", "--out", str(out)]) == EXIT_OK
    assert "pretrained tp2 seed=9" in capsys.readouterr().out
    bad = tmp_path / "bad.toml"
    bad.write_text("method = \n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["pretrain", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["pretrain", "--set", "nonsense", "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_parse_overrides():
    assert parse_overrides(["a=1", "b=0.5", "c=true", "m=tp1", 'q="x y"']) == {
        "a": 1, "b": 0.5, "c": True, "m": "tp1", "q": "x y"}
    assert parse_value("[1, 2]") == [1, 2]
    with pytest.raises(ValueError):
        parse_overrides(["=3"])


def _suite(tmp_path, name, *extra):
    return main(["run-suite", *SMALL, "--methods", "tlora", "tp1", "--modes", "full", "--seeds", "0", "1024", "42",
                 "--out", str(tmp_path / name), *extra])


def test_run_suite_small_grid(tmp_path, capsys):
    assert _suite(tmp_path, "a") == EXIT_OK
    run = tmp_path / "a"
    files = sorted(p.name for p in (run / "metrics").iterdir())
    assert len(files) == 6 and "tp1_full_seed1024.jsonl" in files
    rows = read_summary(run / "summary.tsv")
    assert [(r["method"], r["mode"]) for r in rows] == [("tlora", "full"), ("tp1", "full")]
    capsys.readouterr()
    for r in rows:
        main(["params", "--method", r["method"], "--d", "8", "--r", "2", "--N", "2", "--R", "2", "--phase", "finetune"])
        assert _table(capsys.readouterr().out)["params"] == r["adapt_params"]
    for r in rows:
        losses = [float(v) for v in r["seed_losses"].split(";")]
        assert float(r["median_test_loss"]) == pytest.approx(float(np.median(losses)), rel=1e-9)
    # write-once: a second run into the same directory is refused and changes nothing
    before = (run / "summary.tsv").read_bytes()
    assert _suite(tmp_path, "a") == EXIT_USAGE
    assert (run / "summary.tsv").read_bytes() == before


def test_run_suite_byte_identical_rerun(tmp_path):
    assert _suite(tmp_path, "a") == EXIT_OK
    assert _suite(tmp_path, "b", "--workers", "2") == EXIT_OK
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes(), p.name


def test_run_suite_divergence_exit(tmp_path, capsys):
    code = main(["run-suite", *SMALL, "--set", "lr_modules=1e150", "--set", "pretrain_epochs=30",
                 "--methods", "lora", "--seeds", "0", "--out", str(tmp_path / "d")])
    assert code == EXIT_NUMERIC
    assert "diverged" in (tmp_path / "d" / "failures.txt").read_text()
    assert read_summary(tmp_path / "d" / "summary.tsv")[0]["status"] == "diverged"
    assert main(["report", str(tmp_path / "d")]) == EXIT_NUMERIC


def test_report(tmp_path, capsys):
    assert _suite(tmp_path, "a") == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(tmp_path / "a")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "tp1 full below tlora full" in out
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_USAGE


def test_env_defaults(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TENSORPOLY_RUN_ROOT", str(tmp_path / "root"))
    monkeypatch.setenv("TENSORPOLY_WORKERS", "2")
    assert main(["run-suite", *SMALL, "--methods", "lora", "--seeds", "3"]) == EXIT_OK
    assert (tmp_path / "root" / "suite" / "metrics" / "lora_full_seed3.jsonl").exists()
    monkeypatch.setenv("TENSORPOLY_WORKERS", "0")
    with pytest.raises(ValueError):
        from tensorpoly.suite import worker_count

        worker_count()


def test_config_suite_section(tmp_path, capsys):
    cfg = tmp_path / "grid.toml"
    cfg.write_text("d = 8\nr = 1\nR = 2\nS = 2\nlayers = 1\nG = 3\nT_train = 3\nT_test = 1\nsamples_per_task = 20\n"
                   "eval_samples = 20\nshots = 5\npretrain_epochs = 2\nadapt_epochs = 1\n"
                   '[suite]\nmethods = ["TP-I"]\nmodes = ["full", "z"]\nseeds = [5]\n')
    assert main(["run-suite", "--config", str(cfg), "--out", str(tmp_path / "g")]) == EXIT_OK
    rows = read_summary(tmp_path / "g" / "summary.tsv")
    assert [(r["method"], r["mode"]) for r in rows] == [("tp1", "full"), ("tp1", "z-only")]


def test_direction_checks_logic():
    rows = [{"method": "lora", "mode": "full", "median_test_loss": "3"},
            {"method": "tp1", "mode": "full", "median_test_loss": "2"},
            {"method": "tp1", "mode": "z-only", "median_test_loss": "5"}]
    checks = {name: ok for name, ok, _ in direction_checks(rows)}
    assert checks == {"tp1 full below lora full": True, "tp1 z-only within 2x of full": False}
