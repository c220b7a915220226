# app/services/experiment_runner.py

import concurrent.futures
import functools
import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from sqlalchemy.orm import Session
from tqdm import tqdm

from app.core.config import settings
from app.database import SessionLocal, init_db
from app.models import ExperimentRun
from app.osm_engine.errors import InvalidArgumentError
from app.osm_engine.facade import create_stagnation_runs
from app.osm_engine.fem_assembly import InterfaceVariant
from app.osm_engine.osm_core import convergence_factor, run_osm
from app.osm_engine.transmission import TransmissionMethod
from app.schemas import (ExperimentRunSchema, OsmConfig, StagnationSummary, SweepCell, SweepResult,
                         SweepSpec, frange)

logger = logging.getLogger(__name__)

T = TypeVar("T")

# 一个扫描单元：(全局序号, 子区域单元数, 子区域划分, p, ω)
SweepJob = Tuple[int, Tuple[int, int], Tuple[int, int], float, float]


# ==============================================================================
# --- 预设扫描协议 ---
# ==============================================================================

DESK_GRIDS = [(10, 10), (20, 20)]
LARGE_GRIDS = [(50, 50), (100, 100)]

SWEEP_PRESETS: Dict[str, Dict[str, Any]] = {
    # 两个子区域，(0,4)×(0,2)，窗口 (0,50)
    "two-subdomains": {"decompositions": [(2, 1)], "extent": (4.0, 2.0), "window": (0, 50),
                       "method": TransmissionMethod.AUXILIARY},
    # 2×2 子区域，(0,4)²，窗口 (30,60)，最优 p 可能落在 [0.1, 1]
    "crosspoint-aux": {"decompositions": [(2, 2)], "extent": (4.0, 4.0), "window": (30, 60),
                       "method": TransmissionMethod.AUXILIARY, "extra_p": frange(0.1, 1.0, 0.1)},
    "crosspoint-complete": {"decompositions": [(2, 2)], "extent": (4.0, 4.0), "window": (30, 60),
                            "method": TransmissionMethod.COMPLETE, "extra_p": frange(0.1, 1.0, 0.1)},
}

# ω = 0 即一致质量矩阵，ω = 1 即集中质量矩阵
SWEEP_SLICES: Dict[str, Optional[Tuple[float, float, float]]] = {
    "consistent": (0.0, 0.0, 1.0),
    "lumped": (1.0, 1.0, 1.0),
    "all": None,
}


def preset_fields(name: str, slice_name: str = "all", large: bool | None = None) -> Dict[str, Any]:
    """预设协议对应的 SweepSpec 字段，可再被配置文件与命令行覆盖。"""
    if name not in SWEEP_PRESETS:
        raise InvalidArgumentError(f"未知的扫描预设 '{name}'，可选: {', '.join(SWEEP_PRESETS)}")
    if slice_name not in SWEEP_SLICES:
        raise InvalidArgumentError(f"未知的切片 '{slice_name}'，可选: {', '.join(SWEEP_SLICES)}")

    large = settings.LARGE_GRIDS if large is None else large
    fields: Dict[str, Any] = dict(SWEEP_PRESETS[name])
    fields["grids"] = DESK_GRIDS + (LARGE_GRIDS if large else [])
    if SWEEP_SLICES[slice_name] is not None:
        fields["omega_range"] = SWEEP_SLICES[slice_name]
    return fields


def preset_spec(name: str, slice_name: str = "all", large: bool | None = None, **overrides) -> SweepSpec:
    """按预设协议构造 SweepSpec；overrides 中为 None 的字段不覆盖。"""
    fields = preset_fields(name, slice_name, large)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return SweepSpec.model_validate(fields)


# ==============================================================================
# --- p×ω 扫描 ---
# ==============================================================================

def sweep_jobs(spec: SweepSpec) -> List[SweepJob]:
    jobs: List[SweepJob] = []
    for grid in spec.grids:
        for subdomains in spec.decompositions:
            for omega in spec.omega_values():
                for p in spec.p_values():
                    jobs.append((len(jobs), tuple(grid), tuple(subdomains), p, omega))
    return jobs


def _sweep_cell(spec: SweepSpec, job: SweepJob) -> float:
    """
    单个扫描单元：误差方程、随机初始迹（种子 seed + 序号），返回窗口上的收敛因子。
    失败的单元记为 NaN。
    """
    index, grid, subdomains, p, omega = job
    try:
        cfg = OsmConfig(
            cells=(grid[0] * subdomains[0], grid[1] * subdomains[1]),
            extent=spec.extent,
            subdomains=subdomains,
            p=p,
            eta=spec.eta,
            omega=omega,
            variant=InterfaceVariant.OVERLUMPED,
            method=spec.method,
            iterations=spec.total_iterations,
            seed=spec.seed + index,
            error_equation=True,
        )
        return convergence_factor(run_osm(cfg), *spec.window)
    except Exception as e:
        logger.warning("扫描单元失败 (grid=%s, p=%s, ω=%s): %s: %s", grid, p, omega, type(e).__name__, e)
        return math.nan


def run_sweep(spec: SweepSpec, workers: int | None = None, progress: bool = True) -> List[SweepResult]:
    """
    执行整个扫描。workers 为 0 或 1 时串行执行，否则使用进程池；
    每个单元的种子只取决于其序号，结果与执行方式无关。
    """
    workers = settings.SWEEP_WORKERS if workers is None else workers
    jobs = sweep_jobs(spec)
    to_map = functools.partial(_sweep_cell, spec)
    logger.info("开始扫描：%d 个单元，%s 个工作进程", len(jobs), workers or "串行")

    if workers and workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            kappas = list(tqdm(executor.map(to_map, jobs, chunksize=max(1, len(jobs) // (8 * workers))),
                               total=len(jobs), desc="sweep", disable=not progress))
    else:
        kappas = [to_map(job) for job in tqdm(jobs, desc="sweep", disable=not progress)]

    results: Dict[Tuple[Tuple[int, int], Tuple[int, int]], SweepResult] = {}
    for (_, grid, subdomains, p, omega), kappa in zip(jobs, kappas):
        result = results.setdefault((grid, subdomains), SweepResult(grid=grid, subdomains=subdomains))
        result.cells.append(SweepCell(p=p, omega=omega, kappa=kappa))
        if math.isnan(kappa):
            result.failures += 1

    failures = sum(r.failures for r in results.values())
    if failures:
        logger.warning("扫描完成，%d 个单元失败（记为 NaN）", failures)
    return list(results.values())


def sweep_summary(results: Sequence[SweepResult]) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"failures": sum(r.failures for r in results), "best": []}
    for result in results:
        best = result.best
        summary["best"].append({
            "grid": list(result.grid),
            "subdomains": list(result.subdomains),
            "p": best.p if best else None,
            "omega": best.omega if best else None,
            "kappa": best.kappa if best else None,
        })
    return summary


# ==============================================================================
# --- 停滞实验 ---
# ==============================================================================

def stagnation_config(method: TransmissionMethod = TransmissionMethod.AUXILIARY, iterations: int = 20000,
                      p: float = 2.0, eta: float = 0.0, seed: int | None = None,
                      cells: Tuple[int, int] = (40, 40)) -> OsmConfig:
    """(0,4)² 上的误差方程，默认 h = 1/10。"""
    return OsmConfig(
        cells=cells, extent=(4.0, 4.0), subdomains=(2, 2), p=p, eta=eta,
        variant=InterfaceVariant.LUMPED, method=method, iterations=iterations,
        seed=settings.DEFAULT_SEED if seed is None else seed, error_equation=True,
    )


def run_stagnation(cfg: OsmConfig,
                   decompositions: Sequence[Tuple[int, int]] = ((4, 1), (2, 2))) -> List[StagnationSummary]:
    return [run.get_stagnation_summary() for run in create_stagnation_runs(cfg, decompositions)]


# ==============================================================================
# --- 实验归档 ---
# ==============================================================================

def run_archived(command: str, config: Dict[str, Any], task: Callable[[], Tuple[T, Dict[str, Any]]],
                 run_name: str | None = None) -> T:
    """
    在归档中登记一次运行并执行 task。
    task 返回 (结果, 摘要)；成功时记录摘要，失败时记录错误信息并重新抛出异常。
    """
    init_db()
    db: Session = SessionLocal()
    record = ExperimentRun(command=command, run_name=run_name, config_json=config, status="processing")
    db.add(record)
    db.commit()
    db.refresh(record)
    try:
        result, summary = task()
        record.status = "completed"
        record.summary_json = summary
        db.commit()
        return result

    except Exception as e:
        db.rollback()
        run = db.query(ExperimentRun).filter(ExperimentRun.id == record.id).first()
        if run:
            run.status = "failed"
            run.error_message = f"实验运行失败: {type(e).__name__}: {str(e)}"
            db.commit()
        raise
    finally:
        db.close()


def list_runs(limit: int = 20) -> List[ExperimentRunSchema]:
    init_db()
    db: Session = SessionLocal()
    try:
        runs = db.query(ExperimentRun).order_by(ExperimentRun.id.desc()).limit(limit).all()
        return [ExperimentRunSchema.model_validate(run) for run in runs]
    finally:
        db.close()
