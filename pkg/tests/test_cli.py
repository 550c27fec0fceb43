import json

import pytest

from bkf.cli import (
    EXIT_ESTIMATION,
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    MANIFEST_FILE,
    TRIALS_FILE,
    main,
)

FAST_CFG = """\
seed: 3
agent:
  kind: synthetic
  noise_sd: 0.3
  params: {beta_prior: 0.55, beta_mic: 0.40, beta_mac: 0.39, beta_int: -0.03}
estimation:
  mcmc: {chains: 2, iterations: 600, burn_in: 100}
"""


@pytest.fixture
def fast_cfg(tmp_path):
    path = tmp_path / "fast.yaml"
    path.write_text(FAST_CFG, encoding="utf-8")
    return str(path)


def test_design_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["design", "--out", str(out)]) == EXIT_OK
    scenarios = json.loads((out / "scenarios.json").read_text())
    assert [s["id"] for s in scenarios] == ["S1", "S2", "S3", "S4"]
    prompts = sorted(p.name for p in (out / "prompts").iterdir())
    assert len(prompts) == 8
    assert "-5.0%" in (out / "prompts" / "household_S2.txt").read_text()
    assert "S4" in capsys.readouterr().out
    assert list(json.loads((out / MANIFEST_FILE).read_text())["stages"]) == ["design"]


def test_zero_delta_exits_validation(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("design:\n  delta: 0\n")
    assert main(["design", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "design.delta" in err and ":2:" in err
    assert not (tmp_path / "o").exists()


def test_simulate_estimate_report(tmp_path, fast_cfg, capsys):
    out = str(tmp_path / "o")
    assert main(["simulate", "--config", fast_cfg, "--out", out]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["completed"] == 240
    assert main(["estimate", "--config", fast_cfg, "--out", out, "--persona", "hh"]) == EXIT_OK
    assert (tmp_path / "o" / "posterior_household_all.json").exists()
    assert main(["report", "--config", fast_cfg, "--out", out]) == EXIT_OK
    table = (tmp_path / "o" / "table_iii.txt").read_text()
    assert "[HH]" in table and "beta_int" in table
    for name in ("table_ii.txt", "table_ii.csv", "table_iv.csv", "table_v.csv", "plot_forest.csv",
                 "plot_scenario_means.csv", "verdicts.txt", "figures/forest.png",
                 "figures/scenario_means.png"):
        assert (tmp_path / "o" / name).exists(), name
    verdicts = (tmp_path / "o" / "verdicts.txt").read_text()
    assert "FAIL zero-interaction" in verdicts
    manifest = json.loads((tmp_path / "o" / MANIFEST_FILE).read_text())
    assert set(manifest["stages"]) == {"simulate", "estimate:household_all", "report"}
    assert TRIALS_FILE in manifest["stages"]["estimate:household_all"]["inputs"]
    assert list(tmp_path.joinpath("o").glob("*manifest*")) == [tmp_path / "o" / MANIFEST_FILE]


def test_estimate_single_scenario_exits_estimation(tmp_path, fast_cfg):
    out = str(tmp_path / "o")
    assert main(["simulate", "--config", fast_cfg, "--out", out]) == EXIT_OK
    code = main(["estimate", "--config", fast_cfg, "--out", out, "--filter-scenario", "S1"])
    assert code == EXIT_ESTIMATION


def test_dump_draws(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(FAST_CFG + "  dump_draws: true\n")
    out = str(tmp_path / "o")
    main(["simulate", "--config", str(cfg), "--out", out])
    assert main(["estimate", "--config", str(cfg), "--out", out, "--model", "synthetic"]) == EXIT_OK
    lines = (tmp_path / "o" / "draws_all_synthetic.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 500


@pytest.mark.parametrize("stage", ["estimate", "report"])
def test_missing_stage_input(tmp_path, stage, capsys):
    assert main([stage, "--out", str(tmp_path / "empty")]) == EXIT_IO
    assert "run" in capsys.readouterr().err


def test_run_llm_without_key(tmp_path, monkeypatch):
    monkeypatch.delenv("BKF_ABSENT_KEY", raising=False)
    cfg = tmp_path / "llm.yaml"
    cfg.write_text("endpoint:\n  base_url: http://127.0.0.1:9/v1\n  api_key_env_var: BKF_ABSENT_KEY\n")
    out = tmp_path / "o"
    assert main(["run-llm", "--config", str(cfg), "--out", str(out)]) != EXIT_OK
    assert not (out / TRIALS_FILE).exists()


def test_run_llm_without_endpoint(tmp_path):
    assert main(["run-llm", "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_gen_finetune(tmp_path):
    out = tmp_path / "o"
    assert main(["gen-finetune", "--out", str(out), "--n", "8", "--seed", "4"]) == EXIT_OK
    rows = [json.loads(x) for x in (out / "finetune.jsonl").read_text().splitlines()]
    assert len(rows) == 8
    assert json.loads((out / "finetune.meta.json").read_text())["n"] == 8
    assert main(["gen-finetune", "--out", str(out), "--n", "0"]) == EXIT_VALIDATION


def test_verify_fast_and_deterministic(tmp_path, fast_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--config", fast_cfg, "--out", str(a)]) == EXIT_OK
    assert main(["verify", "--config", fast_cfg, "--out", str(b)]) == EXIT_OK
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    # rerun into the same directory: stale artifacts are replaced, not appended to
    assert main(["verify", "--config", fast_cfg, "--out", str(a)]) == EXIT_OK
    assert (a / TRIALS_FILE).read_bytes() == (b / TRIALS_FILE).read_bytes()


def test_negative_seed_rejected(tmp_path):
    assert main(["design", "--out", str(tmp_path), "--seed", "-1"]) == EXIT_VALIDATION
