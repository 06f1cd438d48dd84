"""Experiment harness: config parsing, runs, sweeps, probes, determinism,
and the CLI exit-code contract."""

import json
import os

import pytest

from mhestab.cli import main as cli_main
from mhestab.harness import (
    AnalysisError,
    ConfigError,
    ExperimentConfig,
    ScenarioSpec,
    analyze,
    deviant_output_probe,
    horizon_sweep,
    load_config,
    resolve,
    run_cell,
    run_experiment,
)

BASE_CONFIG = """
[experiment]
name = demo
plant = s1
certificate = default
mode = max
cost = default
a_factor = 1.05
estimator = {estimator}
horizon = {horizon}
t_final = {t_final}
seeds = 0,1
x0 = 0.5
prior_offset = 1.0
{extra}

[scenario.zero]
kind = zero

[scenario.noise]
kind = bounded_uniform
amplitude = 0.1

[solver]
method = gauss_newton_penalty
use_structured = true

[output]
dir = {out}
"""


def _write_config(tmp_path, **kw):
    text = BASE_CONFIG.format(estimator=kw.get("estimator", "fie"),
                              horizon=kw.get("horizon", 4),
                              t_final=kw.get("t_final", 12),
                              out=str(tmp_path / "out"),
                              extra=kw.get("extra", ""))
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return str(path)


def test_load_config_round_trip(tmp_path):
    path = _write_config(tmp_path, estimator="mhe", horizon=3, t_final=20)
    cfg = load_config(path)
    assert cfg.plant == "s1" and cfg.estimator == "mhe" and cfg.horizon == 3
    assert cfg.seeds == (0, 1)
    assert [s.name for s in cfg.scenarios] == ["zero", "noise"]
    assert cfg.a_factor == 1.05


def test_load_config_seed_ranges(tmp_path):
    path = _write_config(tmp_path, extra="")
    text = open(path).read().replace("seeds = 0,1", "seeds = 3:6")
    open(path, "w").write(text)
    assert load_config(path).seeds == (3, 4, 5)


def test_unknown_plant_rejected():
    cfg = ExperimentConfig(plant="s9")
    with pytest.raises(ConfigError):
        resolve(cfg)


def test_mode_mismatch_is_config_error():
    cfg = ExperimentConfig(mode="median")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_run_experiment_fie_passes(tmp_path):
    cfg = ExperimentConfig(name="fie-s1", plant="s1", mode="max", estimator="fie",
                           t_final=12, seeds=(0, 1), out_dir=str(tmp_path))
    report = run_experiment(cfg)
    assert report.status == "pass"
    data = json.loads(open(report.report_path).read())
    assert data["schema"] == "mhestab-report-v1"
    assert data["violations"] == []
    # defaults echoed for reproducibility
    assert data["config"]["t_max_fie"] == 200
    trace = os.path.join(report.out_dir, "trace_zero-seed0.csv")
    header = open(trace).readline().strip().split(",")
    assert header[:3] == ["t", "xhat0", "x_true0"]
    assert "achieved_cost" in header and "certified_ratio" in header
    assert os.path.exists(os.path.join(report.out_dir, "plots.json"))


def test_mhe_k1_fails_analysis_before_simulation(tmp_path):
    cfg = ExperimentConfig(name="k1", plant="s1", mode="max", estimator="mhe",
                           horizon=1, t_final=10, out_dir=str(tmp_path))
    with pytest.raises(AnalysisError):
        run_experiment(cfg)


def test_run_experiment_mhe_passes(tmp_path):
    for mode in ("max", "sum"):
        cfg = ExperimentConfig(name=f"mhe-{mode}", plant="s1", mode=mode, estimator="mhe",
                               horizon=3, t_final=15, seeds=(0,), out_dir=str(tmp_path))
        report = run_experiment(cfg)
        assert report.status == "pass"
        for cell in report.cells:
            assert cell.certified_steps == cell.total_steps


def test_determinism_byte_identical(tmp_path):
    cfg = ExperimentConfig(name="det", plant="s3", mode="max", estimator="fie",
                           t_final=10, seeds=(0, 1),
                           scenarios=[ScenarioSpec("noise", "bounded_uniform", amplitude=0.1)])
    run_experiment(cfg, str(tmp_path / "a"))
    run_experiment(cfg, str(tmp_path / "b"))
    for name in ("trace_noise-seed0.csv", "trace_noise-seed1.csv", "report.json", "plots.json"):
        a = open(tmp_path / "a" / "det" / name, "rb").read()
        b = open(tmp_path / "b" / "det" / name, "rb").read()
        assert a == b, name


def test_parallel_jobs_match_serial(tmp_path):
    cfg = ExperimentConfig(name="par", plant="s1", mode="max", estimator="fie",
                           t_final=8, seeds=(0, 1, 2))
    run_experiment(cfg, str(tmp_path / "serial"))
    cfg.jobs = 2
    run_experiment(cfg, str(tmp_path / "parallel"))
    for seed in (0, 1, 2):
        name = f"trace_zero-seed{seed}.csv"
        a = open(tmp_path / "serial" / "par" / name, "rb").read()
        b = open(tmp_path / "parallel" / "par" / name, "rb").read()
        assert a == b, name
    ra = json.loads(open(tmp_path / "serial" / "par" / "report.json").read())
    rb = json.loads(open(tmp_path / "parallel" / "par" / "report.json").read())
    assert ra["cells"] == rb["cells"]   # echoed jobs differ, results must not


def test_analyze_only(tmp_path):
    cfg = ExperimentConfig(name="an", plant="s1", mode="max", estimator="mhe",
                           horizon=2, t_final=10, out_dir=str(tmp_path))
    summary = analyze(cfg)
    assert summary["contractions"]["2"]["passed"]
    assert summary["compat_B"] == 1.0
    assert os.path.exists(tmp_path / "an" / "analysis.json")


def test_horizon_sweep_excludes_failing_k(tmp_path):
    cfg = ExperimentConfig(name="sweep", plant="s1", mode="max", estimator="mhe",
                           sweep=(1, 2, 3, 4), t_final=12, seeds=(0,),
                           out_dir=str(tmp_path))
    summary = horizon_sweep(cfg)
    assert summary["excluded_horizons"] == [1]
    assert summary["minimal_passing_horizon"] == 2
    table = summary["gain_table"]
    # bar bounds are nonincreasing across the swept horizons at each probe
    for row in table:
        vals = [row[f"bar_b_K{k}"] for k in (2, 3, 4)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        assert vals[-1] >= row["fie_b"] - 1e-12


def test_deviant_output_probe(tmp_path):
    cfg = ExperimentConfig(name="probe", plant="s2", mode="max", estimator="fie",
                           t_final=10, seeds=(0,), probe_delta=0.4, probe_step=3,
                           scenarios=[ScenarioSpec("noise", "bounded_uniform", amplitude=0.05)],
                           out_dir=str(tmp_path))
    summary = deviant_output_probe(cfg)
    assert summary["status"] == "pass"
    rec = summary["probe"]["noise"]
    assert rec["passed"] and not rec["out_of_range"]
    # zero perturbation reduces to the base pair check
    cfg.probe_delta = 0.0
    assert deviant_output_probe(cfg)["status"] == "pass"
    # perturbation beyond the certified range is stamped
    cfg.probe_delta = 1e6
    rec = deviant_output_probe(cfg)["probe"]["noise"]
    assert rec["out_of_range"]


def test_vector_plant_end_to_end():
    # two-state plant through the generic solver: certified windows must
    # still satisfy the derived bound
    from mhestab.estimator import SolverConfig
    cfg = ExperimentConfig(name="s4", plant="s4", mode="sum", estimator="fie",
                           t_final=8, seeds=(0,), a_factor=1.5,
                           scenarios=[ScenarioSpec("noise", "bounded_uniform",
                                                   amplitude=0.05)])
    cfg.solver = SolverConfig(method="multistart_local", multistart=3, max_iter=150)
    resolved = resolve(cfg)
    cell = run_cell(resolved, cfg.scenarios[0], 0)
    assert cell.certified_steps == cell.total_steps
    assert cell.min_margin >= -1e-9


def test_window_step_margins_recorded(tmp_path):
    cfg = ExperimentConfig(name="win", plant="s1", mode="max", estimator="mhe",
                           horizon=2, t_final=14, seeds=(0,),
                           scenarios=[ScenarioSpec("noise", "bounded_uniform", amplitude=0.1)],
                           out_dir=str(tmp_path))
    report = run_experiment(cfg)
    rows = report.cells[0].rows
    checked = [r for r in rows if r["window_margin"] is not None]
    assert checked, "window-step inequality should be evaluated after the horizon fills"
    assert all(r["window_margin"] >= -1e-9 for r in checked)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_run_and_exit_codes(tmp_path, capsys):
    path = _write_config(tmp_path, estimator="fie", t_final=8)
    assert cli_main(["run", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "run pass" in out

    assert cli_main(["analyze", "--config", path]) == 0

    # MHE with K = 1: analysis failure -> exit 2 before simulation
    bad = _write_config(tmp_path, estimator="mhe", horizon=1, t_final=8)
    assert cli_main(["run", "--config", bad]) == 2

    # unreadable config -> exit 2
    assert cli_main(["run", "--config", str(tmp_path / "missing.ini")]) == 2


def test_cli_sweep_and_probe(tmp_path):
    path = _write_config(tmp_path, estimator="mhe", horizon=2, t_final=10,
                         extra="sweep = 2,3")
    assert cli_main(["sweep", "--config", path, "--seed", "0"]) == 0
    ppath = _write_config(tmp_path, estimator="fie", t_final=8)
    assert cli_main(["probe", "--config", ppath]) == 0


def test_cli_single_seed_override(tmp_path):
    path = _write_config(tmp_path, estimator="fie", t_final=6)
    out = str(tmp_path / "single")
    assert cli_main(["run", "--config", path, "--seed", "7", "--out", out]) == 0
    files = os.listdir(os.path.join(out, "demo"))
    assert "trace_zero-seed7.csv" in files
    assert "trace_zero-seed0.csv" not in files
