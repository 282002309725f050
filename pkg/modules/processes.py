"""
误差过程：模拟以及闭式二阶矩
每个过程既能生成样本，也能给出 Var(Σ_{i∈block} eps_i) 等理论量，供 oracle 使用
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import signal, sparse

from modules.errors import InvalidSpec

logger = logging.getLogger(__name__)


def labels_from_sizes(sizes: Sequence[int]) -> np.ndarray:
    """连续分块的标签，例如 (3, 2) -> 0 0 0 1 1"""
    sizes = np.asarray(sizes, dtype=np.int64)
    return np.repeat(np.arange(sizes.shape[0]), sizes)


def uniform_blocks(n: int, size: int) -> np.ndarray:
    """长度为 size 的连续块（最后一块可以更短）"""
    return np.arange(n) // size


def overlap_square_sum(block_labels: np.ndarray, cluster_labels: np.ndarray) -> np.ndarray:
    """
    对每个 block 计算 Σ_c |block ∩ cluster c|²
    随机效应的和 Σ_{i∈block} b_{c(i)} 的方差正比于该值
    """
    n_blocks = int(block_labels.max()) + 1
    n_clusters = int(cluster_labels.max()) + 1
    pair = block_labels.astype(np.int64) * n_clusters + cluster_labels
    codes, counts = np.unique(pair, return_counts=True)
    return np.bincount(codes // n_clusters, weights=counts.astype(float) ** 2, minlength=n_blocks)


def _autocov_block_sums(gamma: np.ndarray, block_labels: np.ndarray) -> np.ndarray:
    """平稳过程在每个连续块上的和的方差：m·Γ0 + 2Σ_h (m-h)Γ(h)"""
    sizes = np.bincount(block_labels)
    out = np.empty(sizes.shape[0])
    H = gamma.shape[0] - 1
    for m in np.unique(sizes):
        h = np.arange(1, min(m - 1, H) + 1)
        val = m * gamma[0] + 2.0 * np.sum((m - h) * gamma[h])
        out[sizes == m] = val
    return out


@dataclass(frozen=True)
class ErrorProcessSpec:
    """
    误差过程设定，kind 取 iid / ar1 / ma / cluster_re / network_ma
    参数按 kind 使用：
        iid: sigma
        ar1: rho, sigma（sigma 为新息标准差）
        ma: coefficients（θ_0..θ_q，新息为标准正态）, sigma
        cluster_re: sigma_between, sigma_within, cluster_size
        network_ma: edges, weight, sigma
    """
    kind: str = "iid"
    sigma: float = 1.0
    rho: float = 0.0
    coefficients: Tuple[float, ...] = (1.0,)
    sigma_between: float = 0.0
    sigma_within: float = 1.0
    cluster_size: int = 1
    edges: Tuple[Tuple[int, int], ...] = ()
    weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("iid", "ar1", "ma", "cluster_re", "network_ma"):
            raise InvalidSpec(f"未知的误差过程类型: {self.kind}")
        for name in ("sigma", "sigma_between", "sigma_within"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{self.kind}: {name} 不能为负")
        if self.kind == "ar1" and not abs(self.rho) < 1:
            raise InvalidSpec(f"AR(1) 需要 |rho| < 1，当前 rho={self.rho}")
        if self.kind == "ma" and len(self.coefficients) == 0:
            raise InvalidSpec("MA(q) 至少需要一个系数")
        if self.kind == "cluster_re" and self.cluster_size < 1:
            raise InvalidSpec("cluster_size 必须为正整数")

    # ---------------------------------------------------------- 理论矩

    @property
    def icc(self) -> float:
        total = self.sigma_between ** 2 + self.sigma_within ** 2
        return 0.0 if total == 0 else self.sigma_between ** 2 / total

    def autocovariance(self, max_lag: int) -> Optional[np.ndarray]:
        """Γ(0..max_lag)；非平稳索引结构（cluster_re / network_ma）返回 None"""
        h = np.arange(max_lag + 1)
        if self.kind == "iid":
            return np.where(h == 0, self.sigma ** 2, 0.0)
        if self.kind == "ar1":
            return self.sigma ** 2 * self.rho ** h / (1.0 - self.rho ** 2)
        if self.kind == "ma":
            theta = np.asarray(self.coefficients)
            q = theta.shape[0] - 1
            gamma = np.zeros(max_lag + 1)
            for lag in range(min(q, max_lag) + 1):
                gamma[lag] = theta[lag:] @ theta[: q + 1 - lag]
            return self.sigma ** 2 * gamma
        return None

    def network_matrix(self, n: int) -> sparse.csr_matrix:
        """B = I + weight·A，A 为无向邻接矩阵"""
        if self.edges:
            e = np.asarray(self.edges)
            if e.max() >= n:
                raise InvalidSpec(f"网络边的端点超出样本范围 n={n}")
            rows = np.r_[e[:, 0], e[:, 1]]
            cols = np.r_[e[:, 1], e[:, 0]]
            A = sparse.coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n)).tocsr()
            A.data[:] = 1.0
        else:
            A = sparse.csr_matrix((n, n))
        return (sparse.identity(n, format="csr") + self.weight * A).tocsr()

    def block_variances(self, n: int, block_labels: Optional[np.ndarray] = None) -> np.ndarray:
        """
        每个连续块 j 上 Var(Σ_{i∈j} eps_i)
        block_labels 为 None 时每个单位自成一块（即边际方差）
        """
        if block_labels is None:
            block_labels = np.arange(n)
        if self.kind in ("iid", "ar1", "ma"):
            max_size = int(np.bincount(block_labels).max())
            return _autocov_block_sums(self.autocovariance(max_size), block_labels)
        if self.kind == "cluster_re":
            clusters = uniform_blocks(n, self.cluster_size)
            sizes = np.bincount(block_labels).astype(float)
            return (self.sigma_between ** 2 * overlap_square_sum(block_labels, clusters)
                    + self.sigma_within ** 2 * sizes)
        # network_ma: Var(1_G' B u) = sigma² ‖B' 1_G‖²
        B = self.network_matrix(n)
        n_blocks = int(block_labels.max()) + 1
        G = sparse.csr_matrix((np.ones(n), (np.arange(n), block_labels)), shape=(n, n_blocks))
        M = (B.T @ G).tocsc()
        return self.sigma ** 2 * np.asarray(M.multiply(M).sum(axis=0)).ravel()

    def average_variance(self, n: int) -> float:
        """σ²_ε = n⁻¹ Σ Var(eps_i)"""
        return float(self.block_variances(n).mean())

    def total_variance(self, n: int) -> float:
        """Var(Σ_i eps_i)"""
        return float(self.block_variances(n, np.zeros(n, dtype=np.int64))[0])

    # ---------------------------------------------------------- 模拟

    def simulate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise InvalidSpec(f"样本量必须为正: n={n}")
        if self.kind == "iid":
            return self.sigma * rng.standard_normal(n)
        if self.kind == "ar1":
            return _simulate_ar1(self.rho, self.sigma, n, rng)
        if self.kind == "ma":
            theta = np.asarray(self.coefficients)
            q = theta.shape[0] - 1
            u = rng.standard_normal(n + q)
            # eps_t = Σ_k θ_k u_{t-k}
            return self.sigma * np.convolve(u, theta, mode="valid")
        if self.kind == "cluster_re":
            clusters = uniform_blocks(n, self.cluster_size)
            shared = self.sigma_between * rng.standard_normal(int(clusters[-1]) + 1)
            return shared[clusters] + self.sigma_within * rng.standard_normal(n)
        u = rng.standard_normal(n)
        return self.sigma * (self.network_matrix(n) @ u)


def _simulate_ar1(rho: float, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """AR(1)，首项取自平稳分布 N(0, σ²/(1-ρ²))"""
    shocks = sigma * rng.standard_normal(n)
    shocks[0] /= np.sqrt(1.0 - rho ** 2)
    return signal.lfilter([1.0], [1.0, -rho], shocks)


def ar1_autocovariance(rho: float, max_lag: int, sigma: float = 1.0) -> np.ndarray:
    return ErrorProcessSpec(kind="ar1", rho=rho, sigma=sigma).autocovariance(max_lag)

