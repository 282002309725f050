"""
Monte Carlo 重复引擎
每次重复的随机流只由 (base_seed, rep_index) 决定，并行度不影响结果；
汇总按 rep_index 排序后进行
"""
import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.dgp import ScenarioSpec, TruthRecord, assemble
from modules.errors import (
    AllReplicationsFailed,
    EmptyRecords,
    ExcessiveExclusions,
    InvalidSpec,
    RandSEError,
)
from modules.linmodel import Dataset, fit_2sls, fit_ols
from modules.presets import Preset
from modules.processes import uniform_blocks
from modules.rng import replication_seed
from modules.variance import (
    OracleVariance,
    VarianceMethod,
    ci,
    critical_value,
    estimate_all,
    oracle_for,
)

logger = logging.getLogger(__name__)

MAX_EXCLUDED_SHARE = 0.01
# 标准误低于该相对量级视为 0（无噪声场景只剩舍入误差）
DEGENERATE_SE_TOL = 1e-10


@dataclass(frozen=True)
class MethodOutcome:
    beta_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    covered: bool
    rejected_at_5pct: bool


@dataclass(frozen=True)
class ReplicationRecord:
    rep_index: int
    beta_hat: float
    methods: Dict[str, MethodOutcome] = field(default_factory=dict)
    degenerate: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and not self.degenerate


@dataclass(frozen=True)
class MethodSummary:
    mean_se: float
    mean_var: float
    coverage: float
    rejection_rate: float
    mc_se_of_coverage: float
    variance_ratio: float


@dataclass(frozen=True)
class ScenarioResult:
    spec: ScenarioSpec
    base_seed: int
    R: int
    n_used: int
    n_failed: int
    n_degenerate: int
    beta_true: float
    beta_mean: float
    beta_sd: float
    methods: Dict[str, MethodSummary]
    oracle: OracleVariance
    empirical_asy_var: float
    empirical_asy_var_mc_se: float
    records: Tuple[ReplicationRecord, ...] = ()

    @property
    def oracle_asy_var(self) -> float:
        return self.oracle.asy_var

    @property
    def oracle_z(self) -> float:
        if self.empirical_asy_var_mc_se == 0:
            return 0.0 if self.empirical_asy_var == self.oracle_asy_var else float("inf")
        return (self.empirical_asy_var - self.oracle_asy_var) / self.empirical_asy_var_mc_se


def cluster_ids_for(spec: ScenarioSpec, data: Dataset) -> Optional[np.ndarray]:
    """按 cluster_by 选择聚类变量：group / effect / error0 / unit"""
    if spec.cluster_by == "group":
        return data.group_ids
    if spec.cluster_by == "effect":
        return spec.effect.cluster_labels(data.n)
    if spec.cluster_by == "error0":
        return uniform_blocks(data.n, spec.error0.cluster_size)
    if spec.cluster_by == "unit":
        return np.arange(data.n)
    raise InvalidSpec(f"未知的 cluster_by: {spec.cluster_by}")


def run_replication(
    spec: ScenarioSpec,
    base_seed: int,
    rep_index: int,
    ci_dist: str = "normal",
) -> ReplicationRecord:
    """单次重复；生成或估计中的错误记录在结果里，不中断整个模拟"""
    seed = replication_seed(base_seed, rep_index)
    try:
        data, _ = assemble(spec, seed)
        fit = fit_ols(data)
        methods = [VarianceMethod.parse(m) for m in spec.methods]
        tsls = fit_2sls(data) if VarianceMethod.TSLS in methods else None
        clustered = VarianceMethod.CLUSTER_LZ in methods or VarianceMethod.MOULTON in methods
        cluster_ids = cluster_ids_for(spec, data) if clustered else None
        estimates = estimate_all(
            fit,
            data,
            methods,
            cluster_ids=cluster_ids,
            bandwidth=spec.hac_bandwidth,
            cluster_adjust=spec.cluster_adjust,
            tsls_fit=tsls,
        )
    except RandSEError as e:
        logger.warning(f"第 {rep_index} 次重复失败: {e}")
        return ReplicationRecord(rep_index=rep_index, beta_hat=float("nan"), error=f"{type(e).__name__}: {e}")

    df = data.n - 1 - data.d_w
    # 5% 水平检验与区间使用同一种临界值
    z05 = critical_value(0.95, ci_dist, df)
    beta_true = spec.beta_true
    outcomes = {}
    degenerate = False
    for method, (beta, est) in estimates.items():
        lo, hi = ci(beta, est, spec.level, ci_dist, df)
        zero_se = est.se <= DEGENERATE_SE_TOL * max(1.0, abs(beta))
        degenerate = degenerate or zero_se
        if zero_se:
            rejected = abs(beta - beta_true) > DEGENERATE_SE_TOL * max(1.0, abs(beta_true))
        else:
            rejected = abs(beta - beta_true) / est.se > z05
        outcomes[method.value] = MethodOutcome(
            beta_hat=beta,
            se=est.se,
            ci_lo=lo,
            ci_hi=hi,
            covered=bool(lo <= beta_true <= hi),
            rejected_at_5pct=bool(rejected),
        )
    primary = tsls.beta_2sls if tsls is not None and spec.iv is not None else fit.beta_hat
    if degenerate:
        logger.debug(f"第 {rep_index} 次重复的标准误为 0，置信区间退化")
    return ReplicationRecord(
        rep_index=rep_index, beta_hat=float(primary), methods=outcomes, degenerate=degenerate
    )


def coverage(records: Sequence[ReplicationRecord], beta_true: float, method: str) -> float:
    """区间覆盖 beta_true 的重复所占比例"""
    hits = [
        r.methods[method].ci_lo <= beta_true <= r.methods[method].ci_hi
        for r in records
        if method in r.methods
    ]
    if not hits:
        raise EmptyRecords(f"没有含方法 {method} 的重复记录")
    return float(np.mean(hits))


def _summarize_method(
    records: Sequence[ReplicationRecord], method: str, beta_true: float, n: int, oracle: float
) -> MethodSummary:
    se = np.array([r.methods[method].se for r in records])
    rejected = np.array([r.methods[method].rejected_at_5pct for r in records])
    cov = coverage(records, beta_true, method)
    R = se.shape[0]
    mean_var = float(np.mean(se ** 2))
    return MethodSummary(
        mean_se=float(se.mean()),
        mean_var=mean_var,
        coverage=cov,
        rejection_rate=float(rejected.mean()),
        mc_se_of_coverage=float(np.sqrt(cov * (1.0 - cov) / R)),
        variance_ratio=mean_var * n / oracle,
    )


def summarize(
    spec: ScenarioSpec,
    base_seed: int,
    R: int,
    records: Sequence[ReplicationRecord],
    oracle: OracleVariance,
) -> ScenarioResult:
    records = tuple(sorted(records, key=lambda r: r.rep_index))
    used = [r for r in records if r.ok]
    n_failed = sum(r.error is not None for r in records)
    n_degenerate = sum(r.error is None and r.degenerate for r in records)
    if not used:
        raise AllReplicationsFailed(f"{R} 次重复全部失败或退化")
    excluded = R - len(used)
    if excluded > MAX_EXCLUDED_SHARE * R:
        raise ExcessiveExclusions(
            f"剔除 {excluded}/{R} 次重复（失败 {n_failed}，退化 {n_degenerate}），超过 1%"
        )
    if excluded:
        logger.warning(f"剔除 {excluded} 次重复（失败 {n_failed}，退化 {n_degenerate}）")

    n = spec.n
    betas = np.array([r.beta_hat for r in used])
    beta_mean = float(betas.mean())
    beta_sd = float(betas.std(ddof=1)) if betas.shape[0] > 1 else 0.0
    # 方差估计的 MC 标准误：sqrt((m4 - s⁴)/R)
    dev = betas - beta_mean
    m4 = float(np.mean(dev ** 4))
    var_mc_se = n * np.sqrt(max(m4 - beta_sd ** 4, 0.0) / betas.shape[0])

    method_names = [VarianceMethod.parse(m).value for m in spec.methods]
    methods = {
        m: _summarize_method(used, m, spec.beta_true, n, oracle.asy_var) for m in method_names
    }
    return ScenarioResult(
        spec=spec,
        base_seed=base_seed,
        R=R,
        n_used=len(used),
        n_failed=n_failed,
        n_degenerate=n_degenerate,
        beta_true=spec.beta_true,
        beta_mean=beta_mean,
        beta_sd=beta_sd,
        methods=methods,
        oracle=oracle,
        empirical_asy_var=n * beta_sd ** 2,
        empirical_asy_var_mc_se=float(var_mc_se),
        records=records,
    )


def run_scenario(
    spec: ScenarioSpec,
    R: int,
    base_seed: int = 0,
    parallelism: int = 1,
    ci_dist: str = "normal",
) -> ScenarioResult:
    """运行 R 次重复并汇总；结果只取决于 (spec, R, base_seed)"""
    if R < 1:
        raise InvalidSpec(f"重复次数须至少为 1: R={R}")
    parallelism = max(1, int(parallelism))
    oracle = oracle_for(spec)
    logger.info(f"场景 {spec.name}: n={spec.n}, R={R}, seed={base_seed}, 并行度={parallelism}")

    records: List[ReplicationRecord] = []
    step = max(1, R // 10)
    with concurrent.futures.ThreadPoolExecutor(max_workers=parallelism) as executor:
        futures = [
            executor.submit(run_replication, spec, base_seed, r, ci_dist) for r in range(R)
        ]
        for k, future in enumerate(futures, start=1):
            records.append(future.result())
            if k % step == 0 or k == R:
                logger.info(f"已完成 {k}/{R} 次重复")
    return summarize(spec, base_seed, R, records, oracle)


def _metric_value(result: ScenarioResult, truth: TruthRecord, metric: str, method: Optional[str]) -> float:
    if metric == "oracle_z":
        return result.oracle_z
    if method not in result.methods:
        raise InvalidSpec(f"结果中没有方法 {method}")
    summary = result.methods[method]
    if metric == "coverage":
        return summary.coverage
    if metric == "variance_ratio":
        return summary.variance_ratio
    if metric == "consistency":
        return summary.mean_var * truth.n / (truth.sigma2_eps / truth.sigma2_d)
    raise InvalidSpec(f"未知的验收指标: {metric}")


def acceptance_checks(
    result: ScenarioResult, truth: TruthRecord, preset: Preset
) -> List[Tuple[str, float, float, float, bool]]:
    """返回 (准则, 数值, 下界, 上界, 是否通过)"""
    out = []
    for c in preset.criteria:
        value = _metric_value(result, truth, c.metric, c.method)
        passed = bool(c.lo <= value <= c.hi)
        if not passed:
            logger.warning(f"验收准则 {c.label} 未通过: {value:.4f} ∉ [{c.lo}, {c.hi}]")
        out.append((c.label, float(value), c.lo, c.hi, passed))
    return out
