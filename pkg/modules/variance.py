"""
β̂ 的标准误估计（可行估计量）与定理层面的 oracle 渐近方差

尺度约定：
    VarianceEstimate.value 为有限样本尺度 Var(β̂)
    OracleVariance.asy_var 为渐近尺度 Var(√n(β̂ - β))
两者之间的因子 n 只在 Monte Carlo 比较层中使用
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from modules.dgp import AssignmentLevel, ScenarioSpec, truth_record
from modules.errors import (
    DegenerateSpec,
    DimensionMismatch,
    InvalidLevel,
    InvalidSpec,
    NonpositiveVariance,
    SingleCluster,
    UnsupportedSpec,
)
from modules.linmodel import Dataset, OlsFit, TslsFit, residualize_fwl
from modules.processes import ErrorProcessSpec, labels_from_sizes

logger = logging.getLogger(__name__)

FINITE_SCALE = "finite-sample Var(beta_hat)"
ASYMPTOTIC_SCALE = "asymptotic Var(sqrt(n)(beta_hat - beta))"


class VarianceMethod(Enum):
    CLASSIC = "Classic"
    HC0 = "HC0"
    HC1 = "HC1"
    CLUSTER_LZ = "ClusterLZ"
    MOULTON = "Moulton"
    HAC_NW = "HacNW"
    TSLS = "Tsls"

    @classmethod
    def parse(cls, name: Union[str, "VarianceMethod"]) -> "VarianceMethod":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {
            "classic": cls.CLASSIC,
            "hc0": cls.HC0,
            "hc1": cls.HC1,
            "clusterlz": cls.CLUSTER_LZ,
            "cluster": cls.CLUSTER_LZ,
            "moulton": cls.MOULTON,
            "hacnw": cls.HAC_NW,
            "hac": cls.HAC_NW,
            "tsls": cls.TSLS,
            "2sls": cls.TSLS,
        }
        if key not in aliases:
            raise InvalidSpec(f"未知的方差估计方法: {name}")
        return aliases[key]


class OracleTheorem(Enum):
    T1_STRONG_EXOG = "T1_StrongExog"
    T2_COND_HETERO = "T2_CondHetero"
    T3_GROUP_STRONG_EXOG = "T3_GroupStrongExog"
    T4_GROUP_HETERO = "T4_GroupHetero"
    TE_POTENTIAL_OUTCOMES = "TE_PotentialOutcomes"
    IV_FIRST_STAGE = "IV_FirstStage"


@dataclass(frozen=True)
class VarianceEstimate:
    method: VarianceMethod
    value: float
    se: float
    scale: str = FINITE_SCALE

    @classmethod
    def of(cls, method: VarianceMethod, value: float) -> "VarianceEstimate":
        # 二次型的舍入可能给出 -0.0 量级的负数
        value = max(float(value), 0.0)
        return cls(method=method, value=value, se=float(np.sqrt(value)))


@dataclass(frozen=True)
class OracleVariance:
    theorem: OracleTheorem
    asy_var: float
    components: Dict[str, float] = field(default_factory=dict)
    scale: str = ASYMPTOTIC_SCALE


# ------------------------------------------------------------------ 可行估计量

def _beta_scores(fit: OlsFit, data: Dataset) -> np.ndarray:
    """s_i = [(X'X)^{-1} x_i]_1 · ê_i，各夹心估计量的 [1,1] 元素都是 s 的二次型"""
    if data.n != fit.n:
        raise DimensionMismatch(f"拟合结果 n={fit.n} 与数据 n={data.n} 不一致")
    h = data.X @ fit.xtx_inv[:, 0]
    return h * fit.residuals


def var_classic(fit: OlsFit) -> VarianceEstimate:
    """s²(D̆'D̆)^{-1}，即 s²(X'X)^{-1} 的左上元素"""
    return VarianceEstimate.of(VarianceMethod.CLASSIC, fit.s2 / fit.dbreve_ss)


def var_hc(fit: OlsFit, data: Dataset, variant: VarianceMethod = VarianceMethod.HC0) -> VarianceEstimate:
    variant = VarianceMethod.parse(variant)
    if variant not in (VarianceMethod.HC0, VarianceMethod.HC1):
        raise InvalidSpec(f"var_hc 只支持 HC0 / HC1: {variant}")
    s = _beta_scores(fit, data)
    value = float(s @ s)
    if variant is VarianceMethod.HC1:
        value *= data.n / (data.n - 1 - data.d_w)
    return VarianceEstimate.of(variant, value)


def var_cluster(
    fit: OlsFit,
    data: Dataset,
    cluster_ids: Sequence[int],
    small_sample: bool = False,
) -> VarianceEstimate:
    """
    Liang-Zeger 聚类稳健方差
    small_sample 为 True 时乘 G/(G-1)·(n-1)/(n-1-d_w)
    """
    cluster_ids = np.asarray(cluster_ids)
    if cluster_ids.shape[0] != data.n:
        raise DimensionMismatch(f"cluster_ids 长度 {cluster_ids.shape[0]} 与 n={data.n} 不一致")
    _, labels = np.unique(cluster_ids, return_inverse=True)
    G = int(labels.max()) + 1
    if G < 2:
        raise SingleCluster("只有一个簇，meat 矩阵秩退化，拒绝估计")
    s = _beta_scores(fit, data)
    sums = np.bincount(labels, weights=s, minlength=G)
    value = float(sums @ sums)
    if small_sample:
        n, k = data.n, data.d_w
        value *= G / (G - 1) * (n - 1) / (n - 1 - k)
    return VarianceEstimate.of(VarianceMethod.CLUSTER_LZ, value)


def _intraclass(z: np.ndarray, labels: np.ndarray, G: int, pairs: float) -> float:
    """簇内两两乘积的平均值除以 z 的二阶矩；没有簇内配对时为 0"""
    mean_sq = float(z @ z) / z.shape[0]
    if pairs <= 0 or mean_sq == 0:
        return 0.0
    sums = np.bincount(labels, weights=z, minlength=G)
    squares = np.bincount(labels, weights=z * z, minlength=G)
    return float(np.sum(sums ** 2 - squares)) / pairs / mean_sq


def var_moulton(fit: OlsFit, data: Dataset, cluster_ids: Sequence[int]) -> VarianceEstimate:
    """
    Moulton 参数化聚类修正：Classic × [1 + (Var(n_g)/n̄ + n̄ - 1)·ρ_d·ρ_ê]
    ρ_d、ρ_ê 为 D̆ 与残差的簇内相关系数，簇大小方差取总体方差
    只假设簇内等相关，误差在簇内有更复杂结构时应使用 ClusterLZ
    """
    cluster_ids = np.asarray(cluster_ids)
    if cluster_ids.shape[0] != data.n:
        raise DimensionMismatch(f"cluster_ids 长度 {cluster_ids.shape[0]} 与 n={data.n} 不一致")
    _, labels = np.unique(cluster_ids, return_inverse=True)
    G = int(labels.max()) + 1
    if G < 2:
        raise SingleCluster("只有一个簇，无法估计簇内相关")
    sizes = np.bincount(labels, minlength=G).astype(float)
    pairs = float(np.sum(sizes * (sizes - 1)))
    rho_d = _intraclass(residualize_fwl(data), labels, G, pairs)
    rho_e = _intraclass(np.asarray(fit.residuals, dtype=float), labels, G, pairs)
    m = sizes.mean()
    factor = 1.0 + (sizes.var() / m + m - 1.0) * rho_d * rho_e
    logger.debug(f"Moulton 因子 {factor:.4f} (rho_d={rho_d:.4f}, rho_e={rho_e:.4f}, G={G})")
    return VarianceEstimate.of(VarianceMethod.MOULTON, fit.s2 / fit.dbreve_ss * factor)


def default_bandwidth(n: int) -> int:
    """Newey-West 经验规则 floor(4(n/100)^{2/9})"""
    return int(np.floor(4 * (n / 100.0) ** (2.0 / 9.0)))


def var_hac_nw(fit: OlsFit, data: Dataset, bandwidth: Optional[int] = None) -> VarianceEstimate:
    """
    Newey-West HAC，Bartlett 权 w_h = 1 - h/(bandwidth+1)
    调用方需保证数据行按时间顺序排列
    """
    if bandwidth is None:
        bandwidth = default_bandwidth(data.n)
    if bandwidth < 0:
        raise InvalidSpec(f"带宽不能为负: {bandwidth}")
    s = _beta_scores(fit, data)
    value = float(s @ s)
    for h in range(1, min(bandwidth, data.n - 1) + 1):
        w = 1.0 - h / (bandwidth + 1.0)
        value += 2.0 * w * float(s[h:] @ s[:-h])
    return VarianceEstimate.of(VarianceMethod.HAC_NW, value)


def var_2sls(fit: TslsFit) -> VarianceEstimate:
    """s² / (ρ̂² σ̂²_v n)"""
    return VarianceEstimate.of(
        VarianceMethod.TSLS, fit.s2 / (fit.rho_hat ** 2 * fit.sigma2_v_hat * fit.n)
    )


def estimate_all(
    fit: OlsFit,
    data: Dataset,
    methods: Iterable[Union[str, VarianceMethod]],
    cluster_ids: Optional[np.ndarray] = None,
    bandwidth: Optional[int] = None,
    cluster_adjust: bool = False,
    tsls_fit: Optional[TslsFit] = None,
) -> Dict[VarianceMethod, Tuple[float, VarianceEstimate]]:
    """按方法列表计算，返回 {方法: (对应的 β̂, 方差估计)}"""
    out = {}
    for name in methods:
        method = VarianceMethod.parse(name)
        if method is VarianceMethod.CLASSIC:
            out[method] = (fit.beta_hat, var_classic(fit))
        elif method in (VarianceMethod.HC0, VarianceMethod.HC1):
            out[method] = (fit.beta_hat, var_hc(fit, data, method))
        elif method is VarianceMethod.CLUSTER_LZ:
            if cluster_ids is None:
                raise InvalidSpec("ClusterLZ 需要聚类变量")
            out[method] = (fit.beta_hat, var_cluster(fit, data, cluster_ids, cluster_adjust))
        elif method is VarianceMethod.MOULTON:
            if cluster_ids is None:
                raise InvalidSpec("Moulton 需要聚类变量")
            out[method] = (fit.beta_hat, var_moulton(fit, data, cluster_ids))
        elif method is VarianceMethod.HAC_NW:
            out[method] = (fit.beta_hat, var_hac_nw(fit, data, bandwidth))
        else:
            if tsls_fit is None:
                raise InvalidSpec("Tsls 需要工具变量及 2SLS 拟合结果")
            out[method] = (tsls_fit.beta_2sls, var_2sls(tsls_fit))
    return out


# ------------------------------------------------------------------ oracle

def _positive(name: str, value: float) -> None:
    if not value > 0:
        raise NonpositiveVariance(f"{name} 必须为正，当前 {value}")


def oracle_t1(sigma2_eps: float, sigma2_d: float) -> OracleVariance:
    """强外生：σ²_ε / σ²_d"""
    _positive("sigma2_eps", sigma2_eps)
    _positive("sigma2_d", sigma2_d)
    return OracleVariance(
        theorem=OracleTheorem.T1_STRONG_EXOG,
        asy_var=sigma2_eps / sigma2_d,
        components={"sigma2_eps": sigma2_eps, "sigma2_d": sigma2_d},
    )


def oracle_t2(
    mu_A: Sequence[float],
    var_Ae_avg: float,
    longrun_mu_e: float,
    sigma2_d: float,
) -> OracleVariance:
    """
    条件异方差：(σ²_{e,1} + σ²_{e,2}) / σ_d⁴
    var_Ae_avg = n⁻¹Σ E[((A_i-μ_A)'e_i)²]，longrun_mu_e = E[(n^{-1/2}Σ μ_A'e_i)²]
    """
    _positive("sigma2_d", sigma2_d)
    if var_Ae_avg < 0 or longrun_mu_e < 0:
        raise NonpositiveVariance("σ²_{e,1} 与 σ²_{e,2} 不能为负")
    mu_A = np.asarray(mu_A, dtype=float)
    e2 = float(longrun_mu_e) if np.any(mu_A != 0) else 0.0
    return OracleVariance(
        theorem=OracleTheorem.T2_COND_HETERO,
        asy_var=(var_Ae_avg + e2) / sigma2_d ** 2,
        components={"sigma2_e1": float(var_Ae_avg), "sigma2_e2": e2, "sigma2_d": sigma2_d},
    )


def oracle_te(dgp: ScenarioSpec) -> OracleVariance:
    """
    潜在结果框架：n⁻¹ΣE[(d_i-μ_d)²ε_i²]/σ_d⁴ + Var(n^{-1/2}Στ_i) - n⁻¹ΣVar(τ_i)
    """
    if not dgp.treatment.is_binary or dgp.alpha_dw or dgp.iv is not None:
        raise UnsupportedSpec("oracle_te 需要二元处理变量")
    truth = truth_record(dgp)
    return OracleVariance(
        theorem=OracleTheorem.TE_POTENTIAL_OUTCOMES,
        asy_var=truth.te_first + truth.te_adjust,
        components={"first": truth.te_first, "adjustment": truth.te_adjust},
    )


def oracle_t3(
    group_sizes: Sequence[int],
    within_group_error_cov: Union[ErrorProcessSpec, Sequence[np.ndarray]],
    sigma2_d: float,
) -> OracleVariance:
    """
    组级分配：S²_ε / σ²_d，S²_ε = n⁻¹Σ_j E[(Σ_i ε_ij)²]
    within_group_error_cov 可为每组的协方差矩阵列表，或误差过程设定（闭式计算）
    """
    _positive("sigma2_d", sigma2_d)
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if sizes.size == 0 or np.any(sizes < 1):
        raise InvalidSpec("组大小必须为正")
    n = int(sizes.sum())
    if isinstance(within_group_error_cov, ErrorProcessSpec):
        block = within_group_error_cov.block_variances(n, labels_from_sizes(sizes))
    else:
        covs = list(within_group_error_cov)
        if len(covs) != sizes.shape[0]:
            raise DimensionMismatch("协方差矩阵个数与组数不一致")
        block = []
        for size, cov in zip(sizes, covs):
            cov = np.atleast_2d(np.asarray(cov, dtype=float))
            if cov.shape != (size, size):
                raise DimensionMismatch(f"组协方差矩阵形状 {cov.shape} 与组大小 {size} 不符")
            if np.linalg.eigvalsh((cov + cov.T) / 2).min() < -1e-10 * max(1.0, np.trace(cov)):
                raise InvalidSpec("组内协方差矩阵不是半正定的")
            block.append(cov.sum())
        block = np.asarray(block)
    S2 = float(np.sum(block)) / n
    if S2 <= 0:
        raise DegenerateSpec("S²_ε = 0，不满足尺度假设")
    return OracleVariance(
        theorem=OracleTheorem.T3_GROUP_STRONG_EXOG,
        asy_var=S2 / sigma2_d,
        components={"S2_eps": S2, "sigma2_d": sigma2_d},
    )


def oracle_t4(dgp: ScenarioSpec) -> OracleVariance:
    """组级分配 + 条件异方差：(S²_{e,1} + S²_{e,2}) / σ_d⁴"""
    if dgp.treatment.level is not AssignmentLevel.GROUP:
        raise UnsupportedSpec("oracle_t4 需要组级分配")
    truth = truth_record(dgp)
    _positive("sigma2_d", truth.sigma2_d)
    return OracleVariance(
        theorem=OracleTheorem.T4_GROUP_HETERO,
        asy_var=(truth.S2_e1 + truth.S2_e2) / truth.sigma2_d ** 2,
        components={"S2_e1": truth.S2_e1, "S2_e2": truth.S2_e2, "sigma2_d": truth.sigma2_d},
    )


def oracle_iv(sigma2_eps: float, rho: float, sigma2_v: float) -> OracleVariance:
    """2SLS：σ²_ε / (ρ² σ²_v)"""
    _positive("sigma2_eps", sigma2_eps)
    _positive("sigma2_v", sigma2_v)
    if rho == 0:
        raise NonpositiveVariance("第一阶段系数 rho 为 0")
    return OracleVariance(
        theorem=OracleTheorem.IV_FIRST_STAGE,
        asy_var=sigma2_eps / (rho ** 2 * sigma2_v),
        components={"sigma2_eps": sigma2_eps, "rho": rho, "sigma2_v": sigma2_v},
    )


def oracle_for(dgp: ScenarioSpec) -> OracleVariance:
    """按设定选择对应定理的 oracle"""
    truth = truth_record(dgp)
    if dgp.iv is not None:
        return oracle_iv(truth.sigma2_eps, truth.rho_iv, truth.sigma2_v)
    if dgp.treatment.level is AssignmentLevel.GROUP:
        if dgp.effect.is_constant:
            return oracle_t3(np.bincount(dgp.group_labels()), dgp.error0, truth.sigma2_d)
        return oracle_t4(dgp)
    if dgp.effect.is_constant:
        return oracle_t1(truth.sigma2_eps, truth.sigma2_d)
    return oracle_t2(truth.mu_A, truth.sigma2_e1, truth.sigma2_e2, truth.sigma2_d)


# ------------------------------------------------------------------ 置信区间

def critical_value(level: float, dist: str = "normal", df: Optional[int] = None) -> float:
    if not 0.0 < level < 1.0:
        raise InvalidLevel(f"置信水平须在 (0,1) 内: {level}")
    q = (1.0 + level) / 2.0
    if dist == "t":
        if df is None or df < 1:
            raise InvalidLevel("t 分布临界值需要正的自由度")
        return float(stats.t.ppf(q, df))
    return float(stats.norm.ppf(q))


def ci(
    beta_hat: float,
    est: VarianceEstimate,
    level: float = 0.95,
    dist: str = "normal",
    df: Optional[int] = None,
) -> Tuple[float, float]:
    z = critical_value(level, dist, df)
    half = z * est.se
    return beta_hat - half, beta_hat + half
