# app/commands/cli.py

import csv
import functools
import io
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np

from app.core.config import settings
from app.core.log_config import configure_logging
from app.osm_engine.errors import OsmError, VerificationFailure
from app.osm_engine.facade import REPORT_HEADER, SNAPSHOT_HEADER, create_osm_run, scaled_error
from app.osm_engine.fem_assembly import InterfaceVariant
from app.osm_engine.osm_core import (DEGENERATE_MINUS_MODE, DEGENERATE_PLUS_MODE, degenerate_cross_validation,
                                     degenerate_eigen_check, degenerate_model, fixed_point_check,
                                     load_function, solve_mono)
from app.osm_engine.mesh_decomp import build_cartesian_mesh, decompose
from app.osm_engine.transmission import TransmissionMethod
from app.services.experiment_runner import (SWEEP_PRESETS, SWEEP_SLICES, list_runs, preset_fields,
                                            run_archived, run_stagnation, run_sweep, stagnation_config,
                                            sweep_summary)
from .config_parser import parse_config, to_pair

logger = logging.getLogger(__name__)

DEGENERATE_TOLERANCE = 1e-10
DEGENERATE_COLUMNS = ("g12", "g21", "g23", "g32", "g34", "g43", "g41", "g14")


class PairParamType(click.ParamType):
    """命令行中的 'AxB' 形式参数。"""
    name = "AxB"

    def __init__(self, kind: type):
        self._convert = to_pair(kind)

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            return self._convert(value)
        except ValueError as e:
            self.fail(str(e), param, ctx)


INT_PAIR = PairParamType(int)
FLOAT_PAIR = PairParamType(float)


# ==============================================================================
# --- 公共工具 ---
# ==============================================================================

def guarded(command: Callable) -> Callable:
    """把引擎异常映射为退出码：OsmError 取其 exit_code，其余异常为 3。"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except OsmError as e:
            click.echo(f"错误: {e}", err=True)
            click.get_current_context().exit(e.exit_code)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as e:
            logger.exception("命令执行失败")
            click.echo(f"错误: {type(e).__name__}: {e}", err=True)
            click.get_current_context().exit(3)
    return wrapper


def osm_options(command: Callable) -> Callable:
    """单次运行类命令共用的参数；未给出的参数不覆盖配置文件。"""
    options = [
        click.option("--config", "-c", "config", type=click.Path(dir_okay=False), help="key = value 配置文件"),
        click.option("--csv-out", type=click.Path(dir_okay=False), help="CSV 输出文件（默认标准输出）"),
        click.option("--solver", type=click.Choice(["auto", "cholesky", "lu", "cg"]), help="子区域求解器"),
        click.option("--seed", type=int, help="随机初始迹的种子"),
        click.option("--method", type=click.Choice([m.value for m in TransmissionMethod])),
        click.option("--variant", type=click.Choice([v.value for v in InterfaceVariant])),
        click.option("--omega", type=float, help="过度集中因子 ω"),
        click.option("--p", "p", type=float, help="Robin 参数"),
        click.option("--eta", type=float, help="反应系数 η"),
        click.option("--cells", type=INT_PAIR, help="整体网格单元数，如 40x40"),
        click.option("--subdomains", type=INT_PAIR, help="子区域网格，如 2x2"),
        click.option("--extent", "--domain", "extent", type=FLOAT_PAIR, help="区域尺寸，如 4x4"),
        click.option("--iters", "iterations", type=int, help="迭代次数"),
        click.option("--rhs", type=click.Choice(["zero", "constant", "poisson"])),
        click.option("--error-equation/--no-error-equation", "error_equation", default=None),
        click.option("--p-crosspoint", "p_crosspoint", type=float, help="交叉点算子使用的 p"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _emit(rows: Iterable[Sequence[Any]], comments: Sequence[str], csv_out: Optional[str],
          trailer: Sequence[str] = ()) -> None:
    """写出 CSV：# 注释行在前，尾部附加行在后。"""
    buffer = io.StringIO()
    for line in comments:
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    for line in trailer:
        buffer.write(f"{line}\n")
    if csv_out:
        Path(csv_out).write_text(buffer.getvalue(), encoding="utf-8")
    else:
        click.echo(buffer.getvalue(), nl=False)


def _header(command: str, seed: int, **extra: Any) -> str:
    parts = [f"seed={seed}", f"command={command}"] + [f"{k}={_fmt(v)}" for k, v in extra.items()]
    return " ".join(parts)


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _run(ctx: click.Context, command: str, config: Dict[str, Any],
         task: Callable[[], Tuple[Any, Dict[str, Any]]]) -> Any:
    """按需归档后执行 task。"""
    if ctx.obj.get("archive"):
        return run_archived(command, config, task, run_name=ctx.obj.get("run_name"))
    result, _ = task()
    return result


def _parse_iterations(value: str) -> Tuple[int, ...]:
    try:
        return tuple(sorted({int(v) for v in value.replace(" ", "").split(",") if v}))
    except ValueError:
        raise click.BadParameter(f"需要逗号分隔的迭代号，收到 '{value}'", param_hint="--snapshot-at")


# ==============================================================================
# --- 命令组 ---
# ==============================================================================

@click.group()
@click.option("--log-level", default=None, help="日志级别，默认取 OSM_LOG_LEVEL")
@click.option("--archive/--no-archive", default=False, help="是否把本次运行记录到实验归档")
@click.option("--run-name", default=None, help="归档记录的名称")
@click.pass_context
def cli(ctx, log_level, archive, run_name):
    """交叉点优化 Schwarz 方法的实验命令行。"""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj.update(archive=archive, run_name=run_name)


@cli.command()
@osm_options
@click.option("--snapshot-at", default="", help="记录误差分布的迭代号，逗号分隔，如 35,50,75")
@click.option("--snapshot-dir", type=click.Path(file_okay=False), default=".", help="误差分布 CSV 的目录")
@click.pass_context
@guarded
def solve(ctx, config, csv_out, solver, snapshot_at, snapshot_dir, **flags):
    """迭代求解并逐次输出 L∞ 误差与界面能量。"""
    cfg = parse_config(config, "osm", overrides=flags)
    at = _parse_iterations(snapshot_at)

    def task():
        run = create_osm_run(cfg, snapshot_at=at, solver=solver)
        return run, run.get_summary()

    run = _run(ctx, "solve", cfg.model_dump(mode="json"), task)
    _emit([REPORT_HEADER, *run.get_csv_rows()],
          [_header("solve", cfg.seed, method=cfg.method, variant=cfg.variant, omega=cfg.omega, p=cfg.p,
                   eta=cfg.eta, cells=cfg.cells, subdomains=cfg.subdomains, rhs=cfg.rhs)],
          csv_out)

    if run.get_snapshots():
        directory = Path(snapshot_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for n, rows in sorted(run.get_snapshots().items()):
            scaled = scaled_error(rows)
            path = directory / f"snapshot_{n:05d}.csv"
            _emit([SNAPSHOT_HEADER, *(tuple(r) + (float(s),) for r, s in zip(rows, scaled))],
                  [_header("solve", cfg.seed, iteration=n)], str(path))
            logger.info("误差分布已写入 %s", path)


@cli.command()
@click.option("--config", "-c", "config", type=click.Path(dir_okay=False), help="key = value 配置文件")
@click.option("--preset", type=click.Choice(sorted(SWEEP_PRESETS)), help="预设扫描协议")
@click.option("--slice", "slice_name", type=click.Choice(sorted(SWEEP_SLICES)), default="all",
              help="只扫描一致矩阵 (ω=0)、集中矩阵 (ω=1) 或整个 ω 区间")
@click.option("--large/--no-large", default=None, help="加入 50x50 与 100x100 网格（只对预设生效）")
@click.option("--workers", type=int, default=None, help="工作进程数，0 表示串行")
@click.option("--quiet", is_flag=True, help="不显示进度条")
@click.option("--csv-out", type=click.Path(dir_okay=False))
@click.option("--seed", type=int)
@click.option("--method", type=click.Choice([m.value for m in TransmissionMethod]))
@click.option("--iters", "iterations", type=int)
@click.option("--window", type=INT_PAIR, help="收敛因子窗口，如 30:60")
@click.option("--eta", type=float)
@click.pass_context
@guarded
def sweep(ctx, config, preset, slice_name, large, workers, quiet, csv_out, **flags):
    """p×ω 网格上的收敛因子扫描，输出每个单元的 κ 与最优参数。"""
    defaults = preset_fields(preset, large=large) if preset else {}
    if SWEEP_SLICES[slice_name] is not None:
        flags["omega_range"] = SWEEP_SLICES[slice_name]
    spec = parse_config(config, "sweep", overrides=flags, defaults=defaults)

    def task():
        results = run_sweep(spec, workers=workers, progress=not quiet)
        return results, sweep_summary(results)

    results = _run(ctx, "sweep", spec.model_dump(mode="json"), task)

    rows: List[Sequence[Any]] = [("grid", "subdomains", "p", "omega", "kappa")]
    trailer = []
    for result in results:
        rows.extend((_fmt(result.grid), _fmt(result.subdomains), c.p, c.omega, repr(c.kappa))
                    for c in result.cells)
        best = result.best
        if best is not None:
            trailer.append(f"best: p={best.p} omega={best.omega} kappa={best.kappa:.7f} "
                           f"grid={_fmt(result.grid)} subdomains={_fmt(result.subdomains)}")
    failures = sum(r.failures for r in results)
    if failures:
        trailer.append(f"# warnings: {failures} failed cells")
        click.echo(f"警告: {failures} 个扫描单元失败，已记为 NaN", err=True)

    _emit(rows, [_header("sweep", spec.seed, method=spec.method, window=spec.window, preset=preset or "-",
                         slice=slice_name)], csv_out, trailer)


@cli.command()
@click.option("--p", "p", type=float, default=2.0, show_default=True)
@click.option("--h", "h", type=float, default=1.0, show_default=True)
@click.option("--eta", type=float, default=0.0, show_default=True)
@click.option("--iters", "iterations", type=int, default=100, show_default=True)
@click.option("--init", "init", type=click.Choice(["random", "zero", "mode-plus", "mode-minus"]),
              default="random", show_default=True, help="初始迹：随机、零或特征值 ±1 的模态")
@click.option("--seed", type=int, default=None)
@click.option("--csv-out", type=click.Path(dir_okay=False))
@click.pass_context
@guarded
def degenerate(ctx, p, h, eta, iterations, init, seed, csv_out):
    """每个子区域一个单元时，闭式 8×8 迭代与通用引擎逐次对比。"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    initial = {
        "random": lambda: np.random.default_rng(seed).uniform(-1.0, 1.0, 8),
        "zero": lambda: np.zeros(8),
        "mode-plus": lambda: DEGENERATE_PLUS_MODE.copy(),
        "mode-minus": lambda: DEGENERATE_MINUS_MODE.copy(),
    }[init]()
    model = degenerate_model(p, h, eta)
    config = {"p": p, "h": h, "eta": eta, "iterations": iterations, "init": init, "seed": seed}

    def task():
        rows = degenerate_cross_validation(p, h, eta, iterations, initial)
        eigen = degenerate_eigen_check(model)
        return (rows, eigen), {"max_abs_diff": max(r.max_abs_diff for r in rows), **eigen}

    rows, eigen = _run(ctx, "degenerate", config, task)

    table = [("iteration", *DEGENERATE_COLUMNS, "max_abs_diff", "u_norm")]
    table.extend((r.iteration, *(repr(v) for v in r.closed_form), repr(r.max_abs_diff), repr(r.u_norm))
                 for r in rows)
    eigen_line = "# eigen: " + " ".join(
        f"{k}={v:.12f}" if isinstance(v, float) else f"{k}={v}" for k, v in eigen.items())
    _emit(table, [_header("degenerate", seed, p=p, h=h, eta=eta, alpha=repr(model.alpha), init=init)],
          csv_out, [eigen_line])

    worst = max(r.max_abs_diff for r in rows)
    if worst > DEGENERATE_TOLERANCE:
        raise VerificationFailure(f"闭式迭代与引擎的最大偏差 {worst:.3e} 超过 {DEGENERATE_TOLERANCE:.0e}")
    if not all(v for k, v in eigen.items() if k != "spectral_radius"):
        raise VerificationFailure(f"退化模型的特征结构检验未通过: {eigen}")


@cli.command("fixed-point")
@osm_options
@click.option("--perturb", type=float, default=0.0, show_default=True,
              help="在一个界面迹上加 perturb·‖g‖∞ 的扰动")
@click.pass_context
@guarded
def fixed_point(ctx, config, csv_out, solver, perturb, **flags):
    """以单区域解构造不动点迹，迭代一次并报告相对变化。"""
    cfg = parse_config(config, "osm", overrides=flags, defaults={"rhs": "poisson"})

    def task():
        report = fixed_point_check(cfg, perturb=perturb, solver=solver)
        return report, {"change_u": report.change_u, "change_g": report.change_g, "passed": report.passed}

    report = _run(ctx, "fixed-point", cfg.model_dump(mode="json"), task)
    _emit([("method", "change_u", "change_g", "change", "passed"),
           (report.method.value, repr(report.change_u), repr(report.change_g), repr(report.change),
            report.passed)],
          [_header("fixed-point", cfg.seed, variant=cfg.variant, omega=cfg.omega, p=cfg.p,
                   subdomains=cfg.subdomains, perturb=perturb)],
          csv_out)
    if not report.passed:
        raise VerificationFailure(f"不动点检验未通过：相对变化 {report.change:.3e} >= {report.tolerance:.0e}")


@cli.command()
@osm_options
@click.pass_context
@guarded
def mono(ctx, config, csv_out, solver, **flags):
    """单区域有限元参考解，逐节点输出。"""
    cfg = parse_config(config, "osm", overrides=flags, defaults={"p": 1.0, "rhs": "poisson"})

    def task():
        d = decompose(build_cartesian_mesh(*cfg.cells, *cfg.extent), *cfg.subdomains)
        u = solve_mono(d, load_function(cfg), cfg.eta, method=solver)
        return (d.mesh, u), {"max_u": float(np.max(np.abs(u), initial=0.0))}

    mesh, u = _run(ctx, "mono", cfg.model_dump(mode="json"), task)
    coords = mesh.coords
    rows = [("node", "x", "y", "u")]
    rows.extend((j, repr(float(x)), repr(float(y)), repr(float(v))) for j, ((x, y), v) in enumerate(zip(coords, u)))
    _emit(rows, [_header("mono", cfg.seed, cells=cfg.cells, extent=cfg.extent, eta=cfg.eta, rhs=cfg.rhs,
                         max_u=repr(float(np.max(np.abs(u), initial=0.0))))], csv_out)


@cli.command()
@click.option("--method", type=click.Choice([m.value for m in TransmissionMethod]), default="auxiliary",
              show_default=True)
@click.option("--iters", "iterations", type=int, default=20000, show_default=True)
@click.option("--p", "p", type=float, default=2.0, show_default=True)
@click.option("--eta", type=float, default=0.0, show_default=True)
@click.option("--cells", type=INT_PAIR, default="40x40", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--csv-out", type=click.Path(dir_okay=False))
@click.pass_context
@guarded
def stagnation(ctx, method, iterations, p, eta, cells, seed, csv_out):
    """误差方程下 4×1 与 2×2 划分的误差下限与平台期。"""
    cfg = stagnation_config(TransmissionMethod(method), iterations, p, eta, seed, cells)

    def task():
        summaries = run_stagnation(cfg)
        return summaries, {"runs": [s.model_dump(mode="json") for s in summaries]}

    summaries = _run(ctx, "stagnation", cfg.model_dump(mode="json"), task)
    rows = [("subdomains", "method", "initial_error", "min_error", "floor", "plateau_iteration", "below_1e-50")]
    rows.extend((_fmt(s.subdomains), s.method.value, repr(s.initial_error), repr(s.min_error), repr(s.floor),
                 "" if s.plateau_iteration is None else s.plateau_iteration, s.floor < 1e-50)
                for s in summaries)
    _emit(rows, [_header("stagnation", cfg.seed, method=cfg.method, p=p, eta=eta, cells=cfg.cells,
                         iterations=iterations)], csv_out)


@cli.command()
@click.option("--limit", type=int, default=20, show_default=True)
@guarded
def history(limit):
    """列出最近归档的实验运行。"""
    rows: List[Sequence[Any]] = [("id", "command", "status", "created_at", "summary")]
    for run in list_runs(limit):
        summary = run.summary_json if run.status != "failed" else {"error": run.error_message}
        rows.append((run.id, run.command, run.status, run.created_at.isoformat(),
                     json.dumps(summary, ensure_ascii=False)))
    _emit(rows, [], None)
