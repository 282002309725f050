import logging
from dataclasses import dataclass, field, InitVar
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from modules.errors import (
    InvalidDataset,
    MissingInstrument,
    RankDeficient,
    WeakInstrument,
)

logger = logging.getLogger(__name__)

# 秩判定容差：最小主元 <= RANK_TOL * trace(X'X) 视为奇异
RANK_TOL = 1e-12
WEAK_IV_TOL = 1e-8


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """
    一次实现的样本：Y = D·beta + W·gamma + eps
    Args:
        Y: 结果变量 (n,)
        D: 关注的回归变量 (n,)，组级分配时为组内常数
        W: 控制变量 (n, d_w)，第一列为非零常数
        group_ids: 可选，连续编号 0..n_g-1 的分组
        V: 可选，工具变量 (n,)
        check: 为 False 时跳过常数列检查（仅供诊断报告使用）
    """
    Y: np.ndarray
    D: np.ndarray
    W: np.ndarray
    group_ids: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    check: InitVar[bool] = True

    def __post_init__(self, check: bool):
        Y = _frozen(self.Y).ravel()
        D = _frozen(self.D).ravel()
        W = _frozen(self.W)
        if W.ndim == 1:
            W = W.reshape(-1, 1)
        W.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "W", W)

        n = Y.shape[0]
        if D.shape[0] != n or W.shape[0] != n:
            raise InvalidDataset(f"行数不一致: Y={n}, D={D.shape[0]}, W={W.shape[0]}")
        if n < W.shape[1] + 2:
            raise InvalidDataset(f"样本量过小: n={n}, d_w={W.shape[1]}")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(D)) and np.all(np.isfinite(W))):
            raise InvalidDataset("数据包含非有限值")
        if check and not _is_constant_column(W[:, 0]):
            raise InvalidDataset("W 的第一列必须是非零常数（回归须含截距）")

        if self.V is not None:
            V = _frozen(self.V).ravel()
            if V.shape[0] != n:
                raise InvalidDataset(f"工具变量长度 {V.shape[0]} 与 n={n} 不一致")
            object.__setattr__(self, "V", V)

        if self.group_ids is not None:
            g = _frozen(self.group_ids, dtype=np.int64).ravel()
            if g.shape[0] != n:
                raise InvalidDataset(f"group_ids 长度 {g.shape[0]} 与 n={n} 不一致")
            _check_contiguous_labels(g)
            if not _constant_within_groups(D, g):
                raise InvalidDataset("组级分配要求 D 在组内为常数")
            object.__setattr__(self, "group_ids", g)

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])

    @property
    def d_w(self) -> int:
        return int(self.W.shape[1])

    @property
    def X(self) -> np.ndarray:
        """设计矩阵 (D, W)，beta 在第一列"""
        return np.column_stack([self.D, self.W])

    @property
    def n_groups(self) -> int:
        return 0 if self.group_ids is None else int(self.group_ids.max()) + 1


def _is_constant_column(col: np.ndarray) -> bool:
    return bool(col[0] != 0 and np.all(col == col[0]))


def _check_contiguous_labels(labels: np.ndarray) -> None:
    if labels.min() < 0:
        raise InvalidDataset("分组编号不能为负")
    counts = np.bincount(labels)
    if np.any(counts == 0):
        raise InvalidDataset("分组编号必须连续且每个编号都有样本")


def _constant_within_groups(values: np.ndarray, labels: np.ndarray) -> bool:
    # 取每组第一个观测作为参照
    _, first_idx = np.unique(labels, return_index=True)
    return bool(np.all(values == values[first_idx][labels]))


@dataclass(frozen=True)
class OlsFit:
    theta_hat: np.ndarray
    residuals: np.ndarray
    xtx_inv: np.ndarray
    s2: float
    dbreve_ss: float
    n: int

    @property
    def beta_hat(self) -> float:
        return float(self.theta_hat[0])

    @property
    def gamma_hat(self) -> np.ndarray:
        return self.theta_hat[1:]


@dataclass(frozen=True)
class TslsFit:
    beta_2sls: float
    rho_hat: float
    sigma2_v_hat: float
    s2: float
    n: int
    gamma_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0))


def _qr_checked(X: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    """经济型 QR，并按 trace(X'X) 的相对容差检查秩"""
    Q, R = linalg.qr(X, mode="economic")
    pivots = np.diag(R) ** 2
    trace = float(np.sum(X * X))
    if trace <= 0 or pivots.min() <= RANK_TOL * trace:
        raise RankDeficient(
            f"{what} 数值上秩亏 (最小主元 {pivots.min():.3e}, 容差 {RANK_TOL * trace:.3e})"
        )
    return Q, R


def _least_squares(X: np.ndarray, y: np.ndarray, what: str):
    Q, R = _qr_checked(X, what)
    coef = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ coef
    return coef, resid, R


def fit_ols(data: Dataset, dof_correction: bool = False) -> OlsFit:
    """
    OLS 估计 Y ~ (D, W)
    通过 (W, D) 顺序的 QR 分解求解：R 的最后一个对角元平方即 D̆'D̆
    Args:
        dof_correction: 为 True 时 s² 除以 n-1-d_w（默认除以 n）
    """
    n, k = data.n, data.d_w
    X_perm = np.column_stack([data.W, data.D])
    Q, R = _qr_checked(X_perm, "设计矩阵 (D, W)")
    coef_perm = linalg.solve_triangular(R, Q.T @ data.Y)

    R_inv = linalg.solve_triangular(R, np.eye(k + 1))
    inv_perm = R_inv @ R_inv.T

    # 还原为 (D, W) 顺序
    order = np.r_[k, np.arange(k)]
    theta = coef_perm[order]
    xtx_inv = inv_perm[np.ix_(order, order)]
    xtx_inv = (xtx_inv + xtx_inv.T) / 2

    residuals = data.Y - data.X @ theta
    divisor = n - 1 - k if dof_correction else n
    s2 = float(residuals @ residuals) / divisor
    dbreve_ss = float(R[k, k] ** 2)

    return OlsFit(
        theta_hat=_frozen(theta),
        residuals=_frozen(residuals),
        xtx_inv=_frozen(xtx_inv),
        s2=s2,
        dbreve_ss=dbreve_ss,
        n=n,
    )


def _annihilate(W: np.ndarray, v: np.ndarray) -> np.ndarray:
    Q, _ = _qr_checked(W, "控制变量矩阵 W")
    return v - Q @ (Q.T @ v)


def residualize_fwl(data: Dataset) -> np.ndarray:
    """FWL：返回 D̆ = M_W D"""
    return _annihilate(data.W, data.D)


def fit_first_stage(data: Dataset) -> Tuple[float, np.ndarray, np.ndarray]:
    """第一阶段回归 D ~ (V, W)，返回 (rho_hat, alpha_hat, eta_residuals)"""
    if data.V is None:
        raise MissingInstrument("第一阶段回归需要工具变量 V")
    X = np.column_stack([data.V, data.W])
    coef, resid, _ = _least_squares(X, data.D, "第一阶段设计矩阵 (V, W)")
    return float(coef[0]), coef[1:], resid


def fit_2sls(data: Dataset) -> TslsFit:
    """
    2SLS：beta = D'(M_W - M_{V,W})Y / D'(M_W - M_{V,W})D
    由于 M_W - M_{V,W} 是到 Ṽ = M_W V 上的投影，等价于 Ṽ'Y / Ṽ'D
    """
    rho_hat, _, _ = fit_first_stage(data)
    n = data.n
    sd_v = float(np.std(data.V))
    sd_d = float(np.std(data.D))
    if not abs(rho_hat) * sd_v > WEAK_IV_TOL * sd_d:
        raise WeakInstrument(f"工具变量相关性不足: |rho|*sd(V)={abs(rho_hat) * sd_v:.3e}")

    v_tilde = _annihilate(data.W, data.V)
    beta = float(v_tilde @ data.Y) / float(v_tilde @ data.D)

    gamma, resid, _ = _least_squares(data.W, data.Y - data.D * beta, "控制变量矩阵 W")
    s2 = float(resid @ resid) / n

    v_c = data.V - data.V.mean()
    sigma2_v = float(v_c @ v_c) / n

    return TslsFit(
        beta_2sls=beta,
        rho_hat=rho_hat,
        sigma2_v_hat=sigma2_v,
        s2=s2,
        n=n,
        gamma_hat=_frozen(gamma),
        residuals=_frozen(resid),
    )
