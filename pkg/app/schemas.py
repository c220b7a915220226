# app/schemas.py

import math
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt,
                      model_validator)

from app.core.config import settings
from app.osm_engine.fem_assembly import InterfaceVariant
from app.osm_engine.transmission import TransmissionMethod


def frange(start: float, stop: float, step: float) -> List[float]:
    """闭区间 [start, stop] 上步长为 step 的取值，消除浮点累积误差。"""
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [float(v) for v in np.round(start + step * np.arange(count), 10)]


# =============================================================================
# --- 实验配置模型 ---
# =============================================================================

class OsmConfig(BaseModel):
    """
    单次 OSM 运行的配置。cells 为整体网格的单元数，subdomains 为子区域网格。
    """
    model_config = ConfigDict(extra="forbid")

    cells: Tuple[PositiveInt, PositiveInt] = Field((40, 40), description="整体网格单元数 nx×ny")
    extent: Tuple[PositiveFloat, PositiveFloat] = Field((4.0, 4.0), description="区域尺寸 Lx×Ly")
    subdomains: Tuple[PositiveInt, PositiveInt] = Field((2, 2), description="子区域网格 px×py")
    p: float = Field(..., gt=0, description="Robin 参数")
    eta: float = Field(0.0, ge=0, description="反应系数 η")
    omega: float = Field(1.0, ge=0, description="过度集中因子 ω（只对 overlumped 生效）")
    variant: InterfaceVariant = Field(InterfaceVariant.LUMPED, description="界面质量矩阵形式")
    method: TransmissionMethod = Field(TransmissionMethod.AUXILIARY, description="交叉点传输策略")
    iterations: PositiveInt = Field(100, description="迭代次数")
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, description="随机初始迹的种子")
    rhs: str = Field("zero", pattern="^(zero|constant|poisson)$", description="右端项")
    error_equation: bool = Field(False, description="误差方程模式：f = 0，误差相对零解度量")
    p_crosspoint: Optional[float] = Field(None, gt=0, description="交叉点算子单独使用的 p（默认与 p 相同）")

    @model_validator(mode="after")
    def _check_divisibility(self) -> "OsmConfig":
        (nx, ny), (px, py) = self.cells, self.subdomains
        if nx % px or ny % py:
            raise ValueError(f"subdomains={px}x{py} 无法整除 cells={nx}x{ny}")
        return self

    @property
    def h(self) -> Tuple[float, float]:
        return self.extent[0] / self.cells[0], self.extent[1] / self.cells[1]

    @property
    def has_load(self) -> bool:
        return not self.error_equation and self.rhs != "zero"


class SweepSpec(BaseModel):
    """
    p×ω 扫描。grids 为每个子区域的单元数；ω=0 对应一致矩阵，ω=1 对应集中矩阵。
    """
    model_config = ConfigDict(extra="forbid")

    p_range: Tuple[float, float, float] = Field((1.0, 20.0, 0.5), description="p 的 (起点, 终点, 步长)")
    omega_range: Tuple[float, float, float] = Field((0.0, 100.0, 0.25), description="ω 的 (起点, 终点, 步长)")
    extra_p: List[PositiveFloat] = Field(default_factory=list, description="额外的 p 取值")
    grids: List[Tuple[PositiveInt, PositiveInt]] = Field(default_factory=lambda: [(10, 10), (20, 20)])
    decompositions: List[Tuple[PositiveInt, PositiveInt]] = Field(default_factory=lambda: [(2, 1)])
    extent: Tuple[PositiveFloat, PositiveFloat] = Field((4.0, 2.0))
    method: TransmissionMethod = TransmissionMethod.AUXILIARY
    window: Tuple[int, int] = Field((0, 50), description="收敛因子窗口 (n0, n1)")
    iterations: Optional[PositiveInt] = None
    eta: float = Field(0.0, ge=0)
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SweepSpec":
        for name in ("p_range", "omega_range"):
            start, stop, step = getattr(self, name)
            if step <= 0:
                raise ValueError(f"{name} 的步长必须为正")
            if start > stop:
                raise ValueError(f"{name} 的起点不能大于终点")
        if self.p_range[0] <= 0:
            raise ValueError("p_range 的起点必须为正")
        if self.omega_range[0] < 0:
            raise ValueError("omega_range 的起点不能为负")
        n0, n1 = self.window
        if not 0 <= n0 < n1:
            raise ValueError("window 需要满足 0 <= n0 < n1")
        if self.iterations is not None and self.iterations < n1:
            raise ValueError("iterations 不能小于窗口终点 n1")
        return self

    @property
    def total_iterations(self) -> int:
        return self.iterations or self.window[1]

    def p_values(self) -> List[float]:
        return sorted(set(frange(*self.p_range)) | {float(p) for p in self.extra_p})

    def omega_values(self) -> List[float]:
        return frange(*self.omega_range)


# =============================================================================
# --- 结果模型 ---
# =============================================================================

class IterationReport(BaseModel):
    """
    每次迭代的指标。索引 0 为由初始迹求得的第一组子区域解。
    """
    method: TransmissionMethod
    seed: int
    errors: List[float] = Field(..., description="全部子区域节点值的 L∞ 误差")
    energies: Optional[List[float]] = Field(None, description="界面能量 E_n（仅辅助变量法）")
    elapsed: List[float] = Field(..., description="累计耗时（秒）")

    @property
    def iterations(self) -> int:
        return len(self.errors) - 1


class SweepCell(BaseModel):
    p: float
    omega: float
    kappa: float


class SweepResult(BaseModel):
    grid: Tuple[int, int]
    subdomains: Tuple[int, int]
    cells: List[SweepCell] = Field(default_factory=list)
    failures: int = 0

    @property
    def best(self) -> Optional[SweepCell]:
        """最小 κ；并列时取较小的 ω，再取较小的 p。"""
        valid = [c for c in self.cells if not math.isnan(c.kappa)]
        if not valid:
            return None
        return min(valid, key=lambda c: (c.kappa, c.omega, c.p))


class DegenerateRow(BaseModel):
    iteration: int
    closed_form: List[float]
    engine: List[float]
    max_abs_diff: float
    u_norm: float


class FixedPointReport(BaseModel):
    method: TransmissionMethod
    change_u: float = Field(..., description="子区域解的最大相对变化")
    change_g: float = Field(..., description="迹的最大相对变化")
    tolerance: float = 1e-10

    @property
    def change(self) -> float:
        return max(self.change_u, self.change_g)

    @property
    def passed(self) -> bool:
        return self.change < self.tolerance


class StagnationSummary(BaseModel):
    subdomains: Tuple[int, int]
    method: TransmissionMethod
    initial_error: float
    min_error: float
    plateau_iteration: Optional[int] = None

    @property
    def floor(self) -> float:
        return self.min_error / self.initial_error if self.initial_error else 0.0


# =============================================================================
# --- 实验归档 ---
# =============================================================================

class ExperimentRunSchema(BaseModel):
    """归档的一次实验运行"""
    id: int
    command: str
    run_name: Optional[str] = None
    status: str
    config_json: Optional[Dict[str, Any]] = None
    summary_json: Optional[Dict[str, Any]] = None
    error_message: Optional[str] = None
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)
