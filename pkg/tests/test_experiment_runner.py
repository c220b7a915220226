# tests/test_experiment_runner.py

import math

import numpy as np
import pytest

from app.models import ExperimentRun
from app.osm_engine.errors import InvalidArgumentError, NumericFailure
from app.osm_engine.transmission import TransmissionMethod
from app.schemas import SweepCell, SweepResult, SweepSpec
from app.services import experiment_runner
from app.services.experiment_runner import (DESK_GRIDS, LARGE_GRIDS, list_runs, preset_fields, preset_spec,
                                            run_archived, run_stagnation, run_sweep, stagnation_config,
                                            sweep_jobs, sweep_summary)


def _small_spec(**kwargs):
    fields = dict(p_range=(1.0, 2.0, 1.0), omega_range=(0.0, 1.0, 1.0), grids=[(4, 4)],
                  decompositions=[(2, 1)], extent=(4.0, 2.0), window=(0, 10))
    fields.update(kwargs)
    return SweepSpec(**fields)


# ------------------------------------------------------------------------------
# 预设
# ------------------------------------------------------------------------------

def test_preset_grids():
    assert preset_fields("two-subdomains", large=False)["grids"] == DESK_GRIDS
    assert preset_fields("two-subdomains", large=True)["grids"] == DESK_GRIDS + LARGE_GRIDS


def test_preset_slices():
    consistent = preset_spec("crosspoint-aux", "consistent", large=False)
    assert consistent.omega_values() == [0.0]
    assert consistent.window == (30, 60)
    assert 0.1 in consistent.p_values() and 20.0 in consistent.p_values()
    lumped = preset_spec("crosspoint-complete", "lumped", large=False)
    assert lumped.omega_values() == [1.0]
    assert lumped.method is TransmissionMethod.COMPLETE
    full = preset_spec("two-subdomains", large=False)
    assert full.omega_values()[-1] == 100.0
    assert len(full.omega_values()) == 401


def test_preset_overrides():
    spec = preset_spec("two-subdomains", "lumped", large=False, seed=3, window=None)
    assert spec.seed == 3
    assert spec.window == (0, 50)


def test_unknown_preset():
    with pytest.raises(InvalidArgumentError):
        preset_fields("nine-subdomains")
    with pytest.raises(InvalidArgumentError):
        preset_fields("two-subdomains", "diagonal")


# ------------------------------------------------------------------------------
# 扫描
# ------------------------------------------------------------------------------

def test_sweep_jobs_enumerate_grid():
    spec = _small_spec(grids=[(4, 4), (8, 8)])
    jobs = sweep_jobs(spec)
    assert len(jobs) == 2 * 2 * 2
    assert [job[0] for job in jobs] == list(range(8))
    assert jobs[0] == (0, (4, 4), (2, 1), 1.0, 0.0)


def test_small_sweep():
    results = run_sweep(_small_spec(), workers=0, progress=False)
    assert len(results) == 1
    result = results[0]
    assert result.grid == (4, 4)
    assert len(result.cells) == 4
    assert result.failures == 0
    assert all(0.0 < cell.kappa < 1.0 for cell in result.cells)
    assert result.best.kappa == min(cell.kappa for cell in result.cells)


def test_sweep_is_reproducible():
    first = run_sweep(_small_spec(), workers=0, progress=False)
    second = run_sweep(_small_spec(), workers=0, progress=False)
    assert [c.kappa for c in first[0].cells] == [c.kappa for c in second[0].cells]


def test_failed_cells_become_nan(monkeypatch):
    real = experiment_runner.run_osm

    def flaky(cfg):
        if cfg.p == 2.0:
            raise NumericFailure("CG 不收敛")
        return real(cfg)

    monkeypatch.setattr(experiment_runner, "run_osm", flaky)
    result = run_sweep(_small_spec(), workers=0, progress=False)[0]
    assert result.failures == 2
    assert sum(math.isnan(c.kappa) for c in result.cells) == 2
    assert result.best.p == 1.0
    assert sweep_summary([result])["failures"] == 2


@pytest.mark.parametrize("error", [np.linalg.LinAlgError("矩阵奇异"), ValueError("配置无效")])
def test_any_cell_failure_becomes_nan(monkeypatch, error):
    real = experiment_runner.run_osm

    def flaky(cfg):
        if cfg.omega == 1.0:
            raise error
        return real(cfg)

    monkeypatch.setattr(experiment_runner, "run_osm", flaky)
    result = run_sweep(_small_spec(), workers=0, progress=False)[0]
    assert result.failures == 2
    assert all(math.isnan(c.kappa) for c in result.cells if c.omega == 1.0)
    assert result.best.omega == 0.0


def test_best_tie_break():
    result = SweepResult(grid=(10, 10), subdomains=(2, 1), cells=[
        SweepCell(p=3.0, omega=2.0, kappa=0.4),
        SweepCell(p=2.0, omega=2.0, kappa=0.4),
        SweepCell(p=1.0, omega=5.0, kappa=0.4),
        SweepCell(p=1.0, omega=0.0, kappa=math.nan),
        SweepCell(p=9.0, omega=9.0, kappa=0.5),
    ])
    assert (result.best.p, result.best.omega) == (2.0, 2.0)


def test_best_of_failed_sweep():
    result = SweepResult(grid=(10, 10), subdomains=(2, 1), cells=[SweepCell(p=1.0, omega=0.0, kappa=math.nan)],
                         failures=1)
    assert result.best is None
    assert sweep_summary([result])["best"][0]["kappa"] is None


# ------------------------------------------------------------------------------
# 停滞
# ------------------------------------------------------------------------------

def test_stagnation_config_defaults():
    cfg = stagnation_config()
    assert cfg.cells == (40, 40)
    assert cfg.extent == (4.0, 4.0)
    assert cfg.iterations == 20000
    assert cfg.error_equation
    assert cfg.seed == 42


def test_small_stagnation_run():
    summaries = run_stagnation(stagnation_config(iterations=30, cells=(8, 8)))
    assert [s.subdomains for s in summaries] == [(4, 1), (2, 2)]
    for summary in summaries:
        assert summary.min_error <= summary.initial_error
        assert summary.floor <= 1.0


# ------------------------------------------------------------------------------
# 归档
# ------------------------------------------------------------------------------

def test_archived_run_is_recorded(archive_db):
    result = run_archived("solve", {"p": 2.0}, lambda: ("ok", {"final_error": 1e-3}), run_name="demo")
    assert result == "ok"
    runs = list_runs()
    assert len(runs) == 1
    assert runs[0].command == "solve"
    assert runs[0].run_name == "demo"
    assert runs[0].status == "completed"
    assert runs[0].config_json == {"p": 2.0}
    assert runs[0].summary_json == {"final_error": 1e-3}


def test_failed_run_is_recorded(archive_db):
    def boom():
        raise NumericFailure("特征值不收敛")

    with pytest.raises(NumericFailure):
        run_archived("degenerate", {}, boom)
    run = list_runs()[0]
    assert run.status == "failed"
    assert run.error_message == "实验运行失败: NumericFailure: 特征值不收敛"


def test_list_runs_newest_first(archive_db):
    for command in ("solve", "sweep", "mono"):
        run_archived(command, {}, lambda: (None, {}))
    assert [r.command for r in list_runs(limit=2)] == ["mono", "sweep"]
    session = experiment_runner.SessionLocal()
    try:
        assert session.query(ExperimentRun).count() == 3
    finally:
        session.close()
