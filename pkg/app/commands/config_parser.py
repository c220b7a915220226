# app/commands/config_parser.py

"""
`key = value` 配置文件解析。

    # 注释行
    p = 2.0
    cells = 40x40
    p_range = 1:20:0.5

未知键、重复键和无法转换的值都会给出所在行号；数值约束由 pydantic 模型校验。
"""

import re
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Type, Union

from pydantic import BaseModel, ValidationError

from app.osm_engine.errors import ConfigError
from app.schemas import OsmConfig, SweepSpec

Converter = Callable[[str], Any]

_SEPARATOR = re.compile(r"\s*[x×X,:]\s*")
_LINE = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*=\s*(.*?)\s*$")


# ------------------------------------------------------------------------------
# 值转换
# ------------------------------------------------------------------------------

def _split(value: str, count: int | None = None) -> List[str]:
    parts = [part for part in _SEPARATOR.split(value.strip()) if part]
    if count is not None and len(parts) != count:
        raise ValueError(f"需要 {count} 个分量，收到 '{value}'")
    return parts


def to_pair(kind: Type) -> Converter:
    """'40x40'、'40,40' 或 '40:40' → (40, 40)。"""
    def convert(value: str) -> Tuple[Any, Any]:
        a, b = _split(value, 2)
        return kind(a), kind(b)
    return convert


def to_range(value: str) -> Tuple[float, float, float]:
    """'1:20:0.5' → (1.0, 20.0, 0.5)。"""
    start, stop, step = _split(value, 3)
    return float(start), float(stop), float(step)


def to_float_list(value: str) -> List[float]:
    return [float(v) for v in re.split(r"[\s,;]+", value.strip()) if v]


def to_pair_list(value: str) -> List[Tuple[int, int]]:
    """'10x10, 20x20' → [(10, 10), (20, 20)]。"""
    return [to_pair(int)(item) for item in re.split(r"[\s,;]+", value.strip()) if item]


def to_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"无法解析为布尔值: '{value}'")


def to_text(value: str) -> str:
    return value.strip().lower()


OSM_KEYS: Dict[str, Tuple[str, Converter]] = {
    "p": ("p", float),
    "eta": ("eta", float),
    "omega": ("omega", float),
    "variant": ("variant", to_text),
    "method": ("method", to_text),
    "cells": ("cells", to_pair(int)),
    "subdomains": ("subdomains", to_pair(int)),
    "extent": ("extent", to_pair(float)),
    "domain": ("extent", to_pair(float)),
    "iterations": ("iterations", int),
    "iters": ("iterations", int),
    "seed": ("seed", int),
    "rhs": ("rhs", to_text),
    "error_equation": ("error_equation", to_bool),
    "p_crosspoint": ("p_crosspoint", float),
}

SWEEP_KEYS: Dict[str, Tuple[str, Converter]] = {
    "p_range": ("p_range", to_range),
    "omega_range": ("omega_range", to_range),
    "extra_p": ("extra_p", to_float_list),
    "grids": ("grids", to_pair_list),
    "decompositions": ("decompositions", to_pair_list),
    "subdomains": ("decompositions", to_pair_list),
    "extent": ("extent", to_pair(float)),
    "domain": ("extent", to_pair(float)),
    "method": ("method", to_text),
    "window": ("window", to_pair(int)),
    "iterations": ("iterations", int),
    "iters": ("iterations", int),
    "eta": ("eta", float),
    "seed": ("seed", int),
}

MODELS: Dict[str, Tuple[Type[BaseModel], Dict[str, Tuple[str, Converter]]]] = {
    "osm": (OsmConfig, OSM_KEYS),
    "sweep": (SweepSpec, SWEEP_KEYS),
}


# ------------------------------------------------------------------------------
# 解析
# ------------------------------------------------------------------------------

def read_key_values(text: str) -> List[Tuple[str, str, int]]:
    """逐行读取 (键, 原始值, 行号)，跳过空行与 # 注释。"""
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        match = _LINE.match(line)
        if not match:
            raise ConfigError(f"无法解析 '{raw.strip()}'，需要 key = value 格式", line=number)
        key, value = match.groups()
        if not value:
            raise ConfigError(f"键 '{key}' 缺少取值", line=number)
        entries.append((key.lower().replace("-", "_"), value, number))
    return entries


def parse_config_text(text: str, kind: str = "osm", overrides: Optional[Mapping[str, Any]] = None,
                      defaults: Optional[Mapping[str, Any]] = None) -> Union[OsmConfig, SweepSpec]:
    """
    解析配置文本并校验。优先级：defaults < 文本 < overrides（命令行参数）。
    overrides 中为 None 的项视为未给出。
    """
    model, keys = MODELS[kind]
    values: Dict[str, Any] = dict(defaults or {})
    lines: Dict[str, int] = {}

    for key, raw, number in read_key_values(text):
        if key not in keys:
            raise ConfigError(f"未知的键 '{key}'", line=number)
        field, convert = keys[key]
        if field in lines:
            raise ConfigError(f"键 '{key}' 重复（首次出现在第 {lines[field]} 行）", line=number)
        try:
            values[field] = convert(raw)
        except ValueError as e:
            raise ConfigError(f"键 '{key}' 的值 '{raw}' 无效: {e}", line=number) from e
        lines[field] = number

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        return model.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        field = str(first["loc"][0]) if first["loc"] else None
        message = "; ".join(_describe(err) for err in e.errors())
        raise ConfigError(message, line=lines.get(field) if field else None) from e


def _describe(error: Dict[str, Any]) -> str:
    location = ".".join(str(part) for part in error["loc"])
    return f"{location}: {error['msg']}" if location else error["msg"]


def parse_config(path: Union[str, Path, None] = None, kind: str = "osm",
                 overrides: Optional[Mapping[str, Any]] = None,
                 defaults: Optional[Mapping[str, Any]] = None) -> Union[OsmConfig, SweepSpec]:
    """读取配置文件（可省略）并与命令行参数合并。"""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
    return parse_config_text(text, kind=kind, overrides=overrides, defaults=defaults)
