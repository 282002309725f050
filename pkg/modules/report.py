"""
输出：对齐的文本表格、CSV 行、带元数据的 JSON 摘要
CSV 中不含时间戳，相同输入得到逐字节相同的文件；时间只出现在 JSON 的 metadata 里
"""
import datetime
import hashlib
import json
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from modules import __version__
from modules.config import spec_to_flat
from modules.dgp import ScenarioSpec
from modules.montecarlo import ScenarioResult
from modules.rng import DERIVATION_VERSION

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def spec_hash(spec: ScenarioSpec) -> str:
    """场景的 sha256（扁平键值的规范 JSON）"""
    canonical = json.dumps(spec_to_flat(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def metadata(spec: Optional[ScenarioSpec], base_seed: Optional[int]) -> Dict:
    return {
        "spec_hash": spec_hash(spec) if spec is not None else None,
        "base_seed": base_seed,
        "derivation_version": DERIVATION_VERSION,
        "library_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.6g}"
    return str(value)


def format_table(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> str:
    """左对齐的纯文本表格"""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    cells = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


# ------------------------------------------------------------------ 模拟结果

def scenario_rows(result: ScenarioResult) -> List[Dict]:
    rows = []
    for method, s in result.methods.items():
        rows.append({
            "scenario": result.spec.name,
            "method": method,
            "n": result.spec.n,
            "R": result.R,
            "R_used": result.n_used,
            "beta_true": result.beta_true,
            "beta_mean": result.beta_mean,
            "beta_sd": result.beta_sd,
            "mean_se": s.mean_se,
            "coverage": s.coverage,
            "mc_se_of_coverage": s.mc_se_of_coverage,
            "rejection_rate": s.rejection_rate,
            "variance_ratio": s.variance_ratio,
            "oracle_theorem": result.oracle.theorem.value,
            "oracle_asy_var": result.oracle_asy_var,
            "empirical_asy_var": result.empirical_asy_var,
        })
    return rows


def record_rows(result: ScenarioResult) -> List[Dict]:
    rows = []
    for r in result.records:
        if r.error is not None:
            rows.append({"rep_index": r.rep_index, "method": "", "error": r.error})
            continue
        for method, o in r.methods.items():
            rows.append({
                "rep_index": r.rep_index,
                "method": method,
                "beta_hat": o.beta_hat,
                "se": o.se,
                "ci_lo": o.ci_lo,
                "ci_hi": o.ci_hi,
                "covered": o.covered,
                "rejected_at_5pct": o.rejected_at_5pct,
                "degenerate": r.degenerate,
                "error": "",
            })
    return rows


def render_scenario(result: ScenarioResult, layers: Sequence[str] = ()) -> str:
    header = [
        f"场景: {result.spec.name}  n={result.spec.n}  R={result.R}  seed={result.base_seed}",
        f"配置优先级: {' < '.join(layers)}" if layers else "",
        f"oracle ({result.oracle.theorem.value}): {result.oracle_asy_var:.6g}   "
        f"经验渐近方差 n·Var(β̂): {result.empirical_asy_var:.6g} "
        f"(MC 标准误 {result.empirical_asy_var_mc_se:.3g})",
        f"剔除: 失败 {result.n_failed}，退化 {result.n_degenerate}",
    ]
    columns = ["method", "mean_se", "coverage", "mc_se_of_coverage", "rejection_rate", "variance_ratio"]
    return "\n".join([h for h in header if h] + ["", format_table(scenario_rows(result), columns)])


def render_checks(checks: Sequence) -> str:
    rows = [
        {"criterion": c, "value": v, "lo": lo, "hi": hi, "passed": "yes" if ok else "NO"}
        for c, v, lo, hi, ok in checks
    ]
    return format_table(rows)


def _write_csv(rows: Sequence[Dict], path: str) -> str:
    pd.DataFrame(list(rows)).to_csv(path, index=False, encoding="utf-8", float_format=FLOAT_FORMAT)
    return path


def _write_json(document: Dict, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, ensure_ascii=False, indent=2, default=_json_default)
    return path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"无法序列化 {type(value)}")


def write_scenario_outputs(
    result: ScenarioResult,
    out_dir: str,
    write_records: bool = False,
    checks: Optional[Sequence] = None,
) -> List[str]:
    """写出 summary CSV、JSON 摘要，以及可选的逐次重复 CSV"""
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, result.spec.name)
    paths = [_write_csv(scenario_rows(result), f"{stem}_summary.csv")]
    if write_records:
        paths.append(_write_csv(record_rows(result), f"{stem}_replications.csv"))
    document = {
        "metadata": metadata(result.spec, result.base_seed),
        "scenario": spec_to_flat(result.spec),
        "oracle": {
            "theorem": result.oracle.theorem.value,
            "asy_var": result.oracle_asy_var,
            "components": result.oracle.components,
            "scale": result.oracle.scale,
        },
        "empirical_asy_var": result.empirical_asy_var,
        "empirical_asy_var_mc_se": result.empirical_asy_var_mc_se,
        "beta_mean": result.beta_mean,
        "beta_sd": result.beta_sd,
        "R": result.R,
        "R_used": result.n_used,
        "n_failed": result.n_failed,
        "n_degenerate": result.n_degenerate,
        "methods": {m: vars(s) for m, s in result.methods.items()},
    }
    if checks is not None:
        document["acceptance"] = [
            {"criterion": c, "value": v, "lo": lo, "hi": hi, "passed": ok}
            for c, v, lo, hi, ok in checks
        ]
    paths.append(_write_json(document, f"{stem}_summary.json"))
    for p in paths:
        logger.info(f"已写出 {p}")
    return paths


# ------------------------------------------------------------------ 单个数据集的估计

def estimate_rows(estimates: Dict, level: float, intervals: Dict) -> List[Dict]:
    """estimates: {方法: (β̂, VarianceEstimate)}，intervals: {方法: (lo, hi)}"""
    rows = []
    for method, (beta, est) in estimates.items():
        lo, hi = intervals[method]
        rows.append({
            "method": method.value,
            "beta_hat": beta,
            "se": est.se,
            "ci_lo": lo,
            "ci_hi": hi,
            "level": level,
        })
    return rows


def write_estimate_outputs(rows: Sequence[Dict], out_dir: str, name: str, extra: Dict) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, name)
    document = {"metadata": metadata(None, None), **extra, "estimates": list(rows)}
    return [
        _write_csv(rows, f"{stem}_estimates.csv"),
        _write_json(document, f"{stem}_estimates.json"),
    ]


def write_document(document: Dict, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return _write_json(document, os.path.join(out_dir, name))
