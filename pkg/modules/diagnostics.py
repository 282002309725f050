"""
假设的可检验对应物：控制变量共线性、常数列、处理变量矩；
得分的鞅差结构检查；Lemma 中的方差比 D'ΩD / (Γ(0)D'D)；得分分解
只报告证据，不做通过 / 不通过的判定（精确的代数失败除外）
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from modules.dgp import ScenarioSpec, assemble
from modules.errors import DimensionMismatch, InvalidGamma, InvalidSpec, RandSEError
from modules.linmodel import Dataset, fit_ols
from modules.processes import ar1_autocovariance
from modules.rng import hash64, make_stream

logger = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-10
DEGENERATE_D_TOL = 1e-12


@dataclass(frozen=True)
class DiagnosticsReport:
    lambda_min_w: float
    has_constant: bool
    d_moments: Tuple[float, float, float]
    martingale_stats: Tuple[Tuple[int, float, float], ...]
    notes: str = ""
    flags: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict:
        return {
            "lambda_min_w": self.lambda_min_w,
            "has_constant": self.has_constant,
            "d_mean": self.d_moments[0],
            "d_var": self.d_moments[1],
            "d_m4": self.d_moments[2],
            "martingale_stats": [
                {"lag": h, "statistic": s, "se": se} for h, s, se in self.martingale_stats
            ],
            "flags": list(self.flags),
            "notes": self.notes,
        }


def check_assumptions(data: Dataset, max_lag: int = 10) -> DiagnosticsReport:
    """控制变量与处理变量的假设诊断（只报告）"""
    n = data.n
    W = data.W
    gram = W.T @ W / n
    lambda_min = max(float(np.linalg.eigvalsh(gram).min()), 0.0)
    has_constant = bool(W[0, 0] != 0 and np.all(W[:, 0] == W[0, 0]))

    d = data.D
    c = d - d.mean()
    moments = (float(d.mean()), float(np.mean(c ** 2)), float(np.mean(c ** 4)))

    flags: List[str] = []
    notes: List[str] = []
    if lambda_min < COLLINEAR_TOL * float(np.trace(gram)):
        flags.append("multicollinearity")
        notes.append(f"n⁻¹W'W 的最小特征值 {lambda_min:.3e} 接近 0，控制变量存在多重共线性")
    if not has_constant:
        flags.append("no_constant")
        notes.append("W 的第一列不是非零常数，回归缺少截距")
    if moments[1] < DEGENERATE_D_TOL:
        flags.append("degenerate_d")
        notes.append("处理变量的样本方差为 0")

    stats: Tuple = ()
    if not flags:
        lag = min(max_lag, (n - 1) // 2)
        try:
            fit = fit_ols(data)
            stats = tuple(martingale_check(d, fit.residuals, lag))
        except RandSEError as e:
            notes.append(f"鞅差检查跳过: {e}")
    for note in notes:
        logger.warning(note)
    return DiagnosticsReport(
        lambda_min_w=lambda_min,
        has_constant=has_constant,
        d_moments=moments,
        martingale_stats=stats,
        notes="; ".join(notes),
        flags=tuple(flags),
    )


def martingale_check(
    d: np.ndarray, residuals: np.ndarray, max_lag: int
) -> List[Tuple[int, float, float]]:
    """
    对 h = 1..max_lag：stat_h = n⁻¹Σ_i z_i z_{i+h}，z_i = (d_i - d̄)ê_i
    se_h 为乘积项的样本标准差除以 √(n-h)
    """
    d = np.asarray(d, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if d.shape != residuals.shape:
        raise DimensionMismatch("d 与残差长度不一致")
    n = d.shape[0]
    if max_lag >= n / 2:
        logger.warning(f"max_lag={max_lag} 不满足 < n/2，截断为 {(n - 1) // 2}")
        max_lag = (n - 1) // 2
    z = (d - d.mean()) * residuals
    out = []
    for h in range(1, max_lag + 1):
        prod = z[:-h] * z[h:]
        stat = float(prod.sum()) / n
        se = float(prod.std(ddof=1)) / np.sqrt(n - h) if prod.shape[0] > 1 else 0.0
        out.append((h, stat, se))
    return out


def lemma_ratio(d: np.ndarray, gamma: Sequence[float], demean: bool = False) -> float:
    """
    D'ΩD / (Γ(0)·D'D)，Ω_{ij} = Γ(|i-j|)（超过 H 为 0），按带状结构 O(nH) 计算
    默认使用原始 d（引理假设 d 均值为零）；demean=True 时先去均值
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0 or not gamma[0] > 0:
        raise InvalidGamma("Γ(0) 必须为正")
    d = np.asarray(d, dtype=float)
    if demean:
        d = d - d.mean()
    dd = float(d @ d)
    if dd == 0:
        raise InvalidSpec("d 全为零，比值无定义")
    quad = gamma[0] * dd
    for h in range(1, min(gamma.shape[0], d.shape[0])):
        if gamma[h] != 0:
            quad += 2.0 * gamma[h] * float(d[:-h] @ d[h:])
    return quad / (gamma[0] * dd)


def ar1_horizon(rho: float, n: int, tol: float = 1e-12) -> int:
    """AR(1) 自协方差截断到 |ρ|^H < tol"""
    if rho == 0:
        return 0
    return int(min(n - 1, np.ceil(np.log(tol) / np.log(abs(rho)))))


def lemma_check(
    rho: float,
    n: int,
    seeds: int,
    base_seed: int = 0,
    demean: bool = False,
    band: Tuple[float, float] = (0.9, 1.1),
) -> Dict:
    """AR(1) Γ 下、i.i.d. 零均值 d 的比值分布概要"""
    gamma = ar1_autocovariance(rho, ar1_horizon(rho, n))
    ratios = np.empty(seeds)
    for s in range(seeds):
        rng = make_stream(hash64(base_seed, s), "lemma")
        ratios[s] = lemma_ratio(rng.standard_normal(n), gamma, demean=demean)
    inside = (ratios >= band[0]) & (ratios <= band[1])
    return {
        "rho": rho,
        "n": n,
        "seeds": seeds,
        "mean": float(ratios.mean()),
        "sd": float(ratios.std(ddof=1)) if seeds > 1 else 0.0,
        "q05": float(np.quantile(ratios, 0.05)),
        "q50": float(np.quantile(ratios, 0.50)),
        "q95": float(np.quantile(ratios, 0.95)),
        "share_in_band": float(inside.mean()),
        "ratios": ratios,
    }


def score_decomposition(
    A: np.ndarray, e: np.ndarray, mu_A: Sequence[float]
) -> Tuple[float, float]:
    """M1 = n^{-1/2}Σ(A_i-μ_A)'e_i，M2 = n^{-1/2}Σ μ_A'e_i"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    e = np.atleast_2d(np.asarray(e, dtype=float))
    mu_A = np.asarray(mu_A, dtype=float)
    if A.shape != e.shape or A.shape[1] != mu_A.shape[0]:
        raise DimensionMismatch(f"A {A.shape}、e {e.shape} 与 μ_A {mu_A.shape} 维度不一致")
    root_n = np.sqrt(A.shape[0])
    M1 = float(np.sum((A - mu_A) * e)) / root_n
    M2 = float(np.sum(e @ mu_A)) / root_n
    return M1, M2


def martingale_calibration(
    spec: ScenarioSpec,
    seeds: int,
    max_lag: int = 10,
    base_seed: int = 0,
    threshold: float = 3.0,
) -> Dict:
    """多个种子下 |stat| > threshold·se 的比例（误报率）"""
    flagged = 0
    total = 0
    for s in range(seeds):
        data, _ = assemble(spec, hash64(base_seed, s))
        fit = fit_ols(data)
        for _, stat, se in martingale_check(data.D, fit.residuals, max_lag):
            flagged += int(abs(stat) > threshold * se)
            total += 1
    rate = flagged / total if total else 0.0
    logger.info(f"鞅差检查误报率: {rate:.4f} ({flagged}/{total})")
    return {"seeds": seeds, "max_lag": max_lag, "flagged": flagged, "total": total, "rate": rate}


def potential_outcome_scores(
    d: np.ndarray, y0_dev: np.ndarray, tau_dev: np.ndarray, mu_d: float
) -> Tuple[np.ndarray, np.ndarray]:
    """σ(d) = (1, d) 映射：A_i = (d_i-μ_d)(1, d_i)，e_i = (y_i(0)-E, τ_i-E)"""
    c = d - mu_d
    A = np.column_stack([c, c * d])
    e = np.column_stack([y0_dev, tau_dev])
    return A, e

