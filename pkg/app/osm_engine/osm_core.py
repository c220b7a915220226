# app/osm_engine/osm_core.py

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.schemas import DegenerateRow, FixedPointReport, IterationReport, OsmConfig
from .errors import ContractViolation, InvalidArgumentError, NumericFailure
from .fem_assembly import (InterfaceVariant, LoadSpec, SubdomainSystem, assemble_global,
                           build_subdomain_system, discrete_neumann)
from .mesh_decomp import (CrossPointTopology, Decomposition, NodeClass, NodeKind, build_cartesian_mesh,
                          classify_nodes, crosspoint_topology, decompose)
from .sparse_linalg import LinearSolver, eig_small, factorize
from .transmission import (CCLayout, DirectedSlots, TraceStateAux, TraceStateCC, TransmissionMethod,
                           aux_fixed_point_state, aux_gather, aux_neumann_split, aux_update,
                           build_cc_layout, build_directed_slots, cc_fixed_point_state, cc_gather,
                           cc_update, interface_energy, random_aux_state, random_cc_state)

logger = logging.getLogger(__name__)

TraceState = Union[TraceStateAux, TraceStateCC]

PLATEAU_WINDOW = 50
PLATEAU_CHANGE = 0.05


# ==============================================================================
# --- 右端项 ---
# ==============================================================================

def load_function(cfg: OsmConfig) -> LoadSpec:
    """
    zero: f = 0；constant: f = 1；
    poisson: f(x,y) = 2(y(Ly-y) + x(Lx-x))，(0,4)² 上即 2(y(4-y) + x(4-x))。
    """
    if not cfg.has_load:
        return 0.0
    if cfg.rhs == "constant":
        return 1.0
    Lx, Ly = cfg.extent
    return lambda x, y: 2.0 * (y * (Ly - y) + x * (Lx - x))


def solve_mono(d: Decomposition, f: LoadSpec, eta: float, method: str | None = None) -> np.ndarray:
    """单区域有限元解，返回全局节点向量（∂Ω 上为零）。"""
    matrix, load, nodes = assemble_global(d, eta, f)
    solution = np.zeros(d.mesh.n_nodes)
    if len(nodes):
        solution[nodes] = factorize(matrix, method=method).solve(load)
    return solution


# ==============================================================================
# --- 迭代问题 ---
# ==============================================================================

@dataclass(frozen=True, eq=False)
class OsmProblem:
    """一次 OSM 运行所需的全部不可变数据：子区域系统、分解、迹布局与参考解。"""
    config: OsmConfig
    decomposition: Decomposition
    node_class: NodeClass
    systems: Dict[int, SubdomainSystem]
    solvers: Dict[int, LinearSolver]
    slots: DirectedSlots
    topologies: Tuple[CrossPointTopology, ...]
    cc_layout: Optional[CCLayout]
    reference: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def method(self) -> TransmissionMethod:
        return self.config.method

    def restrict(self, global_vector: np.ndarray) -> Dict[int, np.ndarray]:
        return {i: global_vector[sys.nodes] for i, sys in self.systems.items()}


def prepare_problem(cfg: OsmConfig, solver: str | None = None) -> OsmProblem:
    mesh = build_cartesian_mesh(*cfg.cells, *cfg.extent)
    d = decompose(mesh, *cfg.subdomains)
    node_class = classify_nodes(d)
    f = load_function(cfg)

    systems = {
        i: build_subdomain_system(d, i, cfg.p, cfg.eta, cfg.variant, cfg.omega, f, node_class)
        for i in range(1, d.n_subdomains + 1)
    }
    solvers = {i: factorize(sys.lhs, method=solver) for i, sys in systems.items()}
    slots = build_directed_slots(d, systems)
    topologies = tuple(crosspoint_topology(d, int(j), node_class) for j in node_class.crosspoints)
    layout = None
    if cfg.method is TransmissionMethod.COMPLETE:
        layout = build_cc_layout(systems, slots, node_class, topologies, cfg.p,
                                 cfg.variant, cfg.omega, cfg.p_crosspoint)

    if cfg.has_load:
        mono = solve_mono(d, f, cfg.eta, method=solver)
        reference = {i: mono[sys.nodes] for i, sys in systems.items()}
    else:
        reference = {i: np.zeros(sys.size) for i, sys in systems.items()}

    logger.info("准备 OSM 问题：网格 %s，子区域 %s，方法 %s，交叉点 %d 个",
                cfg.cells, cfg.subdomains, cfg.method.value, len(topologies))
    return OsmProblem(cfg, d, node_class, systems, solvers, slots, topologies, layout, reference)


def random_state(problem: OsmProblem, seed: int) -> TraceState:
    """初始迹在 [-1, 1] 上均匀随机，由 seed 决定。"""
    rng = np.random.default_rng(seed)
    if problem.method is TransmissionMethod.AUXILIARY:
        return random_aux_state(problem.slots, rng)
    return random_cc_state(problem.cc_layout, rng)


def zero_state(problem: OsmProblem) -> TraceState:
    state = random_state(problem, 0)
    return state.with_values(np.zeros_like(state.values))


def fixed_point_state(problem: OsmProblem, solutions: Dict[int, np.ndarray]) -> TraceState:
    if problem.method is TransmissionMethod.AUXILIARY:
        return aux_fixed_point_state(problem.slots, problem.systems, solutions)
    return cc_fixed_point_state(problem.cc_layout, problem.systems, solutions)


def osm_step(problem: OsmProblem, state: TraceState) -> Tuple[Dict[int, np.ndarray], TraceState]:
    """
    两阶段交换：先用冻结的迹快照求解全部子区域 (A_i + B_i) u_i = f_i + g_i，
    再由全部新解写出下一组迹。
    """
    auxiliary = problem.method is TransmissionMethod.AUXILIARY
    gather = aux_gather if auxiliary else cc_gather
    solutions = {
        i: problem.solvers[i].solve(sys.f + gather(state, i))
        for i, sys in problem.systems.items()
    }

    if auxiliary:
        new_values = np.empty_like(state.values)
        for i, u_i in solutions.items():
            new_values[problem.slots.out_slots[i]] = aux_update(state, i, u_i)
    else:
        residuals = {i: discrete_neumann(sys, solutions[i]).dense() for i, sys in problem.systems.items()}
        new_values = cc_update(state, solutions, residuals, problem.config.p)
    return solutions, state.with_values(new_values)


def solution_error(problem: OsmProblem, solutions: Dict[int, np.ndarray]) -> float:
    """全部子区域节点值（界面节点按子区域重复计入）的 L∞ 误差。"""
    return max(
        (float(np.max(np.abs(u - problem.reference[i]), initial=0.0)) for i, u in solutions.items()),
        default=0.0,
    )


def neumann_split_defect(problem: OsmProblem, state: TraceStateAux, solutions: Dict[int, np.ndarray]) -> float:
    """max_j |𝒩_{i;j}(u_i) - Σ_{i'} 𝒩_{i,i';j}|，state 为求解 solutions 时使用的迹。"""
    defect = 0.0
    for i, sys in problem.systems.items():
        split = aux_neumann_split(state, i, solutions[i])
        summed = np.bincount(problem.slots.recv_local[problem.slots.in_slots[i]], weights=split,
                             minlength=sys.size)
        neumann = discrete_neumann(sys, solutions[i])
        if len(neumann.local):
            defect = max(defect, float(np.max(np.abs(neumann.values - summed[neumann.local]))))
    return defect


IterateCallback = Callable[[int, Dict[int, np.ndarray], TraceState], None]


def run_osm(
        cfg: OsmConfig,
        *,
        problem: OsmProblem | None = None,
        initial_state: TraceState | None = None,
        on_iterate: IterateCallback | None = None,
        solver: str | None = None,
) -> IterationReport:
    """
    执行 cfg.iterations 次迭代，共记录 iterations + 1 组指标。
    on_iterate(n, solutions, state) 在每次求解后回调，state 为产生该组解的迹。
    """
    problem = problem or prepare_problem(cfg, solver=solver)
    state = initial_state if initial_state is not None else random_state(problem, cfg.seed)
    auxiliary = problem.method is TransmissionMethod.AUXILIARY

    errors: List[float] = []
    energies: List[float] = []
    elapsed: List[float] = []
    start = time.perf_counter()
    for n in range(cfg.iterations + 1):
        if auxiliary:
            energies.append(interface_energy(state, cfg.p))
        solutions, next_state = osm_step(problem, state)
        errors.append(solution_error(problem, solutions))
        elapsed.append(time.perf_counter() - start)
        if on_iterate is not None:
            on_iterate(n, solutions, state)
        state = next_state
        if n and n % 1000 == 0:
            logger.debug("迭代 %d：误差 %.3e", n, errors[-1])

    logger.info("OSM 完成：%d 次迭代，最终误差 %.3e，用时 %.2fs", cfg.iterations, errors[-1], elapsed[-1])
    return IterationReport(
        method=cfg.method,
        seed=cfg.seed,
        errors=errors,
        energies=energies if auxiliary else None,
        elapsed=elapsed,
    )


# ==============================================================================
# --- 指标 ---
# ==============================================================================

def convergence_factor(report: IterationReport, n0: int, n1: int) -> float:
    """κ = exp(log(‖u_{n1}‖∞ / ‖u_{n0}‖∞) / (n1 - n0))。"""
    if not n1 > n0 >= 0:
        raise InvalidArgumentError(f"收敛因子窗口需要 0 <= n0 < n1，收到 ({n0}, {n1})。")
    if n1 >= len(report.errors):
        raise InvalidArgumentError(f"窗口终点 {n1} 超出报告长度 {len(report.errors)}。")
    first, last = report.errors[n0], report.errors[n1]
    if first == 0 or not math.isfinite(first):
        raise NumericFailure(f"第 {n0} 次迭代的误差为 {first}，收敛因子无定义。")
    if last == 0:
        return 0.0
    return math.exp(math.log(last / first) / (n1 - n0))


def energy_series(report: IterationReport) -> List[float]:
    if report.energies is None:
        raise ContractViolation("界面能量只对辅助变量法有定义。")
    return list(report.energies)


def detect_plateau(errors: Sequence[float], window: int = PLATEAU_WINDOW,
                   rel_change: float = PLATEAU_CHANGE) -> int | None:
    """误差在连续 window 次迭代内变化小于 rel_change 的第一个迭代号。"""
    values = np.asarray(errors, dtype=float)
    for n in range(len(values) - window):
        if values[n] > 0 and abs(values[n + window] - values[n]) < rel_change * values[n]:
            return n
    return None


# ==============================================================================
# --- 不动点检验 ---
# ==============================================================================

def fixed_point_check(cfg: OsmConfig, perturb: float = 0.0, solver: str | None = None) -> FixedPointReport:
    """
    用单区域解构造不动点迹（辅助变量法在每个共享节点上做流分解），迭代一次，
    报告子区域解与迹的最大相对变化。perturb 非零时在一个界面迹上加 perturb·‖g‖∞。
    """
    problem = prepare_problem(cfg, solver=solver)
    mono = solve_mono(problem.decomposition, load_function(cfg), cfg.eta, method=solver)
    exact = problem.restrict(mono)
    state = fixed_point_state(problem, exact)

    if perturb and len(state.values):
        values = state.values.copy()
        values[_interface_slot(problem, state)] += perturb * max(float(np.max(np.abs(values))), 1.0)
        state = state.with_values(values)

    solutions, new_state = osm_step(problem, state)
    u_scale = max((float(np.max(np.abs(u), initial=0.0)) for u in exact.values()), default=0.0) or 1.0
    g_scale = float(np.max(np.abs(state.values), initial=0.0)) or 1.0
    change_u = max((float(np.max(np.abs(solutions[i] - exact[i]), initial=0.0)) for i in exact), default=0.0)
    change_g = float(np.max(np.abs(new_state.values - state.values), initial=0.0))
    report = FixedPointReport(method=cfg.method, change_u=change_u / u_scale, change_g=change_g / g_scale)
    logger.info("不动点检验（%s）：相对变化 %.3e", cfg.method.value, report.change)
    return report


def _interface_slot(problem: OsmProblem, state: TraceState) -> int:
    """优先扰动界面节点上的迹，没有时取第一个槽位。"""
    nodes = state.slots.node if isinstance(state, TraceStateAux) else state.layout.node
    kinds = problem.node_class.kind[nodes]
    candidates = np.flatnonzero(kinds == NodeKind.INTERFACE)
    return int(candidates[0]) if len(candidates) else 0


# ==============================================================================
# --- 退化模型：每个子区域一个 Q1 单元 ---
# ==============================================================================

DEGENERATE_ORDER = ((1, 2), (2, 1), (2, 3), (3, 2), (3, 4), (4, 3), (4, 1), (1, 4))


@dataclass(frozen=True)
class DegenerateModel:
    """
    2×2 单元网格上辅助变量法的闭式迭代矩阵，迹向量顺序为
    (g12, g21, g23, g32, g34, g43, g41, g14)，子区域从右上角起逆时针编号。
    """
    alpha: float
    matrix: np.ndarray

    def gather_u(self, traces: np.ndarray) -> np.ndarray:
        """每个子区域收到的迹之和 (g12+g14, g21+g23, g32+g34, g43+g41)。"""
        t = np.asarray(traces)
        return np.array([t[0] + t[7], t[1] + t[2], t[3] + t[4], t[5] + t[6]])


def degenerate_model(p: float, h: float, eta: float) -> DegenerateModel:
    if not p > 0 or not h > 0 or eta < 0:
        raise InvalidArgumentError(f"退化模型需要 p > 0, h > 0, η >= 0，收到 p={p}, h={h}, η={eta}。")
    alpha = p * h / (eta * h * h / 9.0 + 2.0 / 3.0 + p * h)
    a, b = alpha, alpha - 1.0
    entries = {
        0: {1: b, 2: a},
        1: {0: b, 7: a},
        2: {3: b, 4: a},
        3: {1: a, 2: b},
        4: {5: b, 6: a},
        5: {3: a, 4: b},
        6: {0: a, 7: b},
        7: {5: a, 6: b},
    }
    matrix = np.zeros((8, 8))
    for row, cols in entries.items():
        for col, value in cols.items():
            matrix[row, col] = value
    return DegenerateModel(alpha=alpha, matrix=matrix)


DEGENERATE_PLUS_MODE = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
DEGENERATE_MINUS_MODE = np.array([1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0])


def degenerate_eigen_check(model: DegenerateModel, tol: float = 1e-8) -> Dict[str, float | bool]:
    """
    检查 ±1 是否为特征值，以及两个已知模态 M v = v、M w = -w 是否成立。
    两个模态对子区域解都没有贡献。
    """
    eigen = eig_small(model.matrix)
    plus = model.matrix @ DEGENERATE_PLUS_MODE
    minus = model.matrix @ DEGENERATE_MINUS_MODE
    return {
        "spectral_radius": eigen.spectral_radius,
        "plus_one": eigen.has_eigenvalue(1.0, tol),
        "minus_one": eigen.has_eigenvalue(-1.0, tol),
        "plus_mode": bool(np.allclose(plus, DEGENERATE_PLUS_MODE, rtol=0, atol=1e-12)),
        "minus_mode": bool(np.allclose(minus, -DEGENERATE_MINUS_MODE, rtol=0, atol=1e-12)),
    }


def degenerate_config(p: float, h: float, eta: float, iterations: int = 1) -> OsmConfig:
    return OsmConfig(
        cells=(2, 2), extent=(2 * h, 2 * h), subdomains=(2, 2), p=p, eta=eta,
        variant=InterfaceVariant.LUMPED, method=TransmissionMethod.AUXILIARY,
        iterations=iterations, error_equation=True,
    )


def degenerate_slot_order(problem: OsmProblem) -> np.ndarray:
    """把闭式模型的迹顺序映射到引擎的有向槽位：闭式编号 k 即交叉点循环顺序中的第 k 个子区域。"""
    if len(problem.topologies) != 1 or problem.topologies[0].size != 4:
        raise ContractViolation("退化模型只适用于 2×2 单元、2×2 子区域的网格。")
    topo = problem.topologies[0]
    slots = problem.slots
    lookup = {(int(r), int(s)): k for k, (r, s, j) in
              enumerate(zip(slots.recv, slots.send, slots.node)) if j == topo.node}
    return np.array([lookup[(topo.subdomains[a - 1], topo.subdomains[b - 1])] for a, b in DEGENERATE_ORDER])


def degenerate_cross_validation(p: float, h: float, eta: float, iterations: int,
                                initial: np.ndarray) -> List[DegenerateRow]:
    """
    闭式 8×8 迭代与通用引擎逐次对比，返回每次迭代的两组迹及其最大偏差。
    """
    model = degenerate_model(p, h, eta)
    problem = prepare_problem(degenerate_config(p, h, eta, iterations))
    order = degenerate_slot_order(problem)
    denominator = eta * h * h / 9.0 + 2.0 / 3.0 + p * h

    closed = np.asarray(initial, dtype=float).copy()
    values = np.empty(len(problem.slots))
    values[order] = closed
    state: TraceState = TraceStateAux(slots=problem.slots, values=values)

    rows = []
    for n in range(iterations + 1):
        engine = state.values[order]
        difference = float(np.max(np.abs(engine - closed)))
        u_norm = float(np.max(np.abs(model.gather_u(closed)))) / denominator
        rows.append(DegenerateRow(iteration=n, closed_form=closed.tolist(), engine=engine.tolist(),
                                  max_abs_diff=difference, u_norm=u_norm))
        if n == iterations:
            break
        closed = model.matrix @ closed
        _, state = osm_step(problem, state)
    return rows
