# app/osm_engine/facade.py

import logging
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.schemas import IterationReport, OsmConfig, StagnationSummary
from .fem_assembly import variant_weights
from .osm_core import (OsmProblem, convergence_factor, detect_plateau, prepare_problem,
                       run_osm)

logger = logging.getLogger(__name__)

REPORT_HEADER = ("iteration", "error_linf", "energy", "elapsed_seconds")
SNAPSHOT_HEADER = ("subdomain", "x", "y", "error", "scaled_error")

SnapshotRow = Tuple[int, float, float, float]


class OsmRun:
    """
    一次 OSM 运行结果的封装类。

    本类不负责迭代，迭代由 run_osm 完成；这里只提供便捷的访问方法。
    CSV 行与停滞摘要采用懒加载，首次访问时生成。
    """

    def __init__(self, config: OsmConfig, report: IterationReport,
                 snapshots: Optional[Dict[int, List[SnapshotRow]]] = None):
        self._config = config
        self._report = report
        # 指定迭代号上的逐节点误差
        self._snapshots = snapshots or {}
        # 缓存，首次访问时生成
        self._rows: Optional[List[Tuple[Any, ...]]] = None
        self._stagnation: Optional[StagnationSummary] = None

    @property
    def config(self) -> OsmConfig:
        return self._config

    def get_report(self) -> IterationReport:
        return self._report

    def get_csv_rows(self) -> List[Tuple[Any, ...]]:
        """
        每次迭代一行：iteration, error_linf, energy, elapsed_seconds。
        界面能量只在辅助变量法且界面矩阵为集中形式时单调不增，其余情况该列留空。
        """
        if self._rows is None:
            report = self._report
            lumped = variant_weights(self._config.variant, self._config.omega)[0] == 0.0
            energies = report.energies if report.energies and lumped else [None] * len(report.errors)
            self._rows = [
                (n, repr(err), "" if energy is None else repr(energy), f"{elapsed:.6f}")
                for n, (err, energy, elapsed) in enumerate(zip(report.errors, energies, report.elapsed))
            ]
        return self._rows

    def get_snapshots(self) -> Dict[int, List[SnapshotRow]]:
        return self._snapshots

    def get_stagnation_summary(self) -> StagnationSummary:
        """
        停滞摘要：初始误差、最小误差与平台期起点（50 次迭代内变化不足 5%）。
        """
        if self._stagnation is None:
            errors = self._report.errors
            plateau = detect_plateau(errors)
            if plateau is not None:
                logger.info("检测到停滞：子区域 %s，自第 %d 次迭代起误差不再下降",
                            self._config.subdomains, plateau)
            self._stagnation = StagnationSummary(
                subdomains=self._config.subdomains,
                method=self._config.method,
                initial_error=errors[0],
                min_error=min(errors),
                plateau_iteration=plateau,
            )
        return self._stagnation

    def kappa(self, n0: int, n1: int) -> float:
        return convergence_factor(self._report, n0, n1)

    def get_summary(self) -> Dict[str, Any]:
        """归档用的结果摘要。"""
        errors = self._report.errors
        return {
            "iterations": self._report.iterations,
            "initial_error": errors[0],
            "final_error": errors[-1],
            "min_error": min(errors),
            "elapsed_seconds": self._report.elapsed[-1],
            "snapshots": sorted(self._snapshots),
        }


# ------------------------------------------------------------------------------
# 快照回调
# ------------------------------------------------------------------------------

def _snapshot_collector(problem: OsmProblem, iterations: Iterable[int],
                        store: Dict[int, List[SnapshotRow]]):
    wanted = set(iterations)
    coords = problem.decomposition.mesh.coords

    def collect(n, solutions, _state):
        if n not in wanted:
            return
        rows: List[SnapshotRow] = []
        for i, sys in problem.systems.items():
            error = solutions[i] - problem.reference[i]
            xy = coords[sys.nodes]
            rows.extend((i, float(x), float(y), float(e)) for (x, y), e in zip(xy, error))
        store[n] = rows

    return collect


# ------------------------------------------------------------------------------
# 场景函数（Use Case Function）：面向外部调用的统一接口
# ------------------------------------------------------------------------------

def create_osm_run(cfg: OsmConfig, snapshot_at: Iterable[int] = (), solver: str | None = None) -> OsmRun:
    """
    执行一次完整的 OSM 运行。

      - 组装子区域系统并分解矩阵
      - 按 cfg.seed 生成随机初始迹并迭代
      - 在 snapshot_at 指定的迭代号上记录逐节点误差

    :param cfg: 运行配置
    :param snapshot_at: 需要记录误差分布的迭代号
    :param solver: 子区域求解器（None 时使用全局配置）
    :return: 封装后的 OsmRun 实例
    """
    snapshot_at = tuple(snapshot_at)

    # 步骤 1: 组装并分解
    problem = prepare_problem(cfg, solver=solver)

    # 步骤 2: 迭代，必要时挂上快照回调
    snapshots: Dict[int, List[SnapshotRow]] = {}
    callback = _snapshot_collector(problem, snapshot_at, snapshots) if snapshot_at else None
    report = run_osm(cfg, problem=problem, on_iterate=callback)

    missing = sorted(set(snapshot_at) - set(snapshots))
    if missing:
        logger.warning("快照迭代号 %s 超出迭代次数 %d，已忽略", missing, cfg.iterations)

    # 步骤 3: 封装返回
    return OsmRun(cfg, report, snapshots)


def create_stagnation_runs(cfg: OsmConfig, decompositions: Iterable[Tuple[int, int]] = ((4, 1), (2, 2)),
                           solver: str | None = None) -> List[OsmRun]:
    """
    误差方程 (f = 0) 下对比不同子区域划分的误差下限。
    带交叉点的划分在辅助变量法下会停滞在远高于机器精度的水平。
    """
    runs = []
    for subdomains in decompositions:
        run_cfg = OsmConfig.model_validate({**cfg.model_dump(), "subdomains": tuple(subdomains),
                                            "error_equation": True})
        runs.append(create_osm_run(run_cfg, solver=solver))
    return runs


def scaled_error(rows: List[SnapshotRow]) -> np.ndarray:
    """按最大绝对值归一化的误差分布。"""
    values = np.array([r[3] for r in rows], dtype=float)
    peak = float(np.max(np.abs(values), initial=0.0))
    return values / peak if peak else values
