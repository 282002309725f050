"""
配置层
    .env（python-dotenv）：RANDSE_THREADS / RANDSE_LOG_LEVEL / RANDSE_OUT_DIR
    场景文件：扁平 key=value 文本，键名与 ScenarioSpec 字段一致，嵌套结构用点号
        error0.kind=ar1
        error0.rho=0.7
        controls.0.kind=ar1
        iv.eta.sigma=1
        gamma_true=1,0.5,-0.5
    同一文件还可以写运行参数（RUN_KEYS）：R、seed、parallelism、out 等
    每个运行参数和 SCENARIO_FLAG_KEYS 中的场景键都有同名命令行参数
优先级：预设 < 场景文件 < --set 覆盖 < 专用命令行参数
"""
import dataclasses
import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from modules.dgp import IvSpec, ScenarioSpec
from modules.errors import ConfigError, InvalidSpec
from modules.presets import get_preset
from modules.processes import ErrorProcessSpec
from modules.variance import VarianceMethod

logger = logging.getLogger(__name__)

INT_TUPLES = ("group_sizes", "cluster_sizes")
TOP_LEVEL_SKIP = ("error0", "treatment", "effect", "controls", "iv")
# 有专用命令行参数的场景键
SCENARIO_FLAG_KEYS = ("n", "level", "methods", "cluster_adjust")


@dataclass(frozen=True)
class Settings:
    threads: int
    log_level: str
    out_dir: str


@dataclass(frozen=True)
class RunConfig:
    """不属于场景本身的运行参数；None 表示取默认值"""
    R: Optional[int] = None
    seed: int = 0
    parallelism: Optional[int] = None
    out: Optional[str] = None
    write_replications: bool = False
    t_crit: bool = False
    dump_data: bool = False
    acceptance: bool = False

    def __post_init__(self):
        if self.R is not None and self.R < 1:
            raise ConfigError(f"R 必须为正整数: {self.R}")
        if self.parallelism is not None and self.parallelism < 1:
            raise ConfigError(f"parallelism 必须为正整数: {self.parallelism}")


RUN_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig))


def load_settings() -> Settings:
    """读取 .env 与环境变量"""
    load_dotenv()
    raw_threads = os.getenv("RANDSE_THREADS", "")
    try:
        threads = int(raw_threads) if raw_threads else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"RANDSE_THREADS 不是整数: {raw_threads}")
    return Settings(
        threads=max(1, threads),
        log_level=os.getenv("RANDSE_LOG_LEVEL", "INFO").upper(),
        out_dir=os.getenv("RANDSE_OUT_DIR", "out"),
    )


# ------------------------------------------------------------------ 值的解析

def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: 无法解析为布尔值: {raw}")


def _parse_edges(key: str, raw: str) -> Tuple[Tuple[int, int], ...]:
    edges = []
    for item in _split(raw):
        try:
            a, b = item.split("-")
            edges.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"{key}: 边应写作 i-j，得到 {item}")
    return tuple(edges)


def _split(raw: str) -> List[str]:
    return [s.strip() for s in raw.split(",") if s.strip()]


def parse_methods(key: str, raw: str) -> Tuple[str, ...]:
    """逗号分隔的方法名，统一成规范名称；未知名称报配置错误"""
    try:
        return tuple(VarianceMethod.parse(item).value for item in _split(raw))
    except InvalidSpec as e:
        raise ConfigError(f"{key}: {e}")


def _parse_run(items: Dict[str, str]) -> RunConfig:
    changes = {}
    for f in dataclasses.fields(RunConfig):
        raw = items.get(f.name)
        if raw is None:
            continue
        if f.name in ("R", "seed", "parallelism"):
            try:
                changes[f.name] = int(raw)
            except ValueError:
                raise ConfigError(f"{f.name}: 不是整数: {raw}")
        elif f.name == "out":
            changes[f.name] = raw.strip()
        else:
            changes[f.name] = _parse_bool(f.name, raw)
    return RunConfig(**changes)


def _convert(key: str, name: str, current, raw: Optional[str]):
    """按字段当前值的类型解析字符串"""
    if raw is None:
        raise ConfigError(f"{key}: 缺少取值")
    try:
        if name == "edges":
            return _parse_edges(key, raw)
        if name in INT_TUPLES:
            return tuple(int(s) for s in _split(raw))
        if name == "methods":
            return parse_methods(key, raw)
        if isinstance(current, tuple):
            return tuple(float(s) for s in _split(raw))
        if name == "hac_bandwidth":
            return None if raw.strip().lower() in ("", "none", "auto") else int(raw)
        if isinstance(current, bool):
            return _parse_bool(key, raw)
        if isinstance(current, Enum):
            return type(current)(raw.strip())
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{key}: 无法解析取值 {raw!r}: {e}")


def _replace(obj, prefix: str, items: Dict[str, str]):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for name, raw in items.items():
        if name not in names:
            raise ConfigError(f"未知的配置键: {prefix}{name}")
        changes[name] = _convert(prefix + name, name, getattr(obj, name), raw)
    return dataclasses.replace(obj, **changes) if changes else obj


# ------------------------------------------------------------------ 覆盖

def apply_overrides(spec: ScenarioSpec, overrides: Dict[str, str]) -> ScenarioSpec:
    """把点号键的覆盖项应用到场景上；未知键直接报错"""
    top: Dict[str, str] = {}
    nested: Dict[str, Dict[str, str]] = {"error0": {}, "treatment": {}, "effect": {}}
    controls: Dict[int, Dict[str, str]] = {}
    iv_items: Dict[str, str] = {}
    eta_items: Dict[str, str] = {}

    for key, raw in overrides.items():
        parts = key.strip().split(".")
        head = parts[0]
        if head in nested and len(parts) == 2:
            nested[head][parts[1]] = raw
        elif head == "controls" and len(parts) == 3 and parts[1].isdigit():
            controls.setdefault(int(parts[1]), {})[parts[2]] = raw
        elif head == "iv" and len(parts) == 3 and parts[1] == "eta":
            eta_items[parts[2]] = raw
        elif head == "iv" and len(parts) == 2:
            iv_items[parts[1]] = raw
        elif len(parts) == 1 and head not in TOP_LEVEL_SKIP:
            top[head] = raw
        else:
            raise ConfigError(f"未知的配置键: {key}")

    changes = {}
    for field_name, items in nested.items():
        if items:
            changes[field_name] = _replace(getattr(spec, field_name), f"{field_name}.", items)

    if controls:
        current = list(spec.controls)
        while len(current) < max(controls) + 1:
            current.append(ErrorProcessSpec())
        for k, items in controls.items():
            current[k] = _replace(current[k], f"controls.{k}.", items)
        changes["controls"] = tuple(current)

    if iv_items or eta_items:
        iv = spec.iv if spec.iv is not None else IvSpec()
        if eta_items:
            iv = dataclasses.replace(iv, eta=_replace(iv.eta, "iv.eta.", eta_items))
        changes["iv"] = _replace(iv, "iv.", iv_items)

    spec_fields = {f.name for f in dataclasses.fields(ScenarioSpec)}
    for name, raw in top.items():
        if name not in spec_fields:
            raise ConfigError(f"未知的配置键: {name}")
        changes[name] = _convert(name, name, getattr(spec, name), raw)
    return dataclasses.replace(spec, **changes) if changes else spec


def parse_set(items: Iterable[str]) -> Dict[str, str]:
    """--set key=value 列表"""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set 需要 key=value 形式: {item}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_scenario_file(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"配置文件不存在: {path}")
    values = dotenv_values(path, interpolate=False)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"配置文件中的键缺少取值: {', '.join(missing)}")
    return dict(values)


def load_scenario(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    sets: Iterable[str] = (),
    flags: Optional[Dict[str, str]] = None,
) -> Tuple[ScenarioSpec, RunConfig, List[str]]:
    """
    按优先级合成场景，返回 (场景, 运行参数, 各层来源说明)
    配置文件可以用 preset=名称 指定基础预设
    """
    layers: List[str] = []
    file_items: Dict[str, str] = {}
    if config_path:
        file_items = read_scenario_file(config_path)
        preset = file_items.pop("preset", None) or preset

    spec = get_preset(preset).spec if preset else ScenarioSpec()
    layers.append(f"预设: {preset}" if preset else "默认场景")
    # 各层合并后一次性应用，后面的层覆盖前面的同名键
    merged: Dict[str, str] = {}
    if file_items:
        merged.update(file_items)
        layers.append(f"配置文件: {config_path} ({len(file_items)} 项)")
    set_items = parse_set(sets)
    if set_items:
        merged.update(set_items)
        layers.append(f"--set: {', '.join(f'{k}={v}' for k, v in set_items.items())}")
    if flags:
        flags = {k: v for k, v in flags.items() if v is not None}
        if flags:
            merged.update(flags)
            layers.append(f"命令行参数: {', '.join(f'{k}={v}' for k, v in flags.items())}")
    run = _parse_run({k: merged.pop(k) for k in RUN_KEYS if k in merged})
    if merged:
        spec = apply_overrides(spec, merged)
    logger.debug(f"场景来源: {' < '.join(layers)}")
    return spec, run, layers


# ------------------------------------------------------------------ 反向：场景 -> 扁平键值

def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}-{b}" for a, b in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(obj, prefix: str, out: Dict[str, str]) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            _flatten(value, f"{prefix}{f.name}.", out)
        elif f.name == "controls":
            for k, ctrl in enumerate(value):
                _flatten(ctrl, f"{prefix}controls.{k}.", out)
        elif f.name == "iv":
            if value is not None:
                _flatten(value, f"{prefix}iv.", out)
        else:
            out[prefix + f.name] = _format(value)


def spec_to_flat(spec: ScenarioSpec) -> Dict[str, str]:
    """场景的扁平键值表示，可以原样写回配置文件"""
    out: Dict[str, str] = {}
    _flatten(spec, "", out)
    return dict(sorted(out.items()))
