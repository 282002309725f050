"""
数据生成过程：误差结构、个体 / 组级随机分配、潜在结果与处理效应、控制变量、IV 第一阶段
所有生成器都是 (spec, seed) 的确定性函数
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from modules.errors import InvalidSpec, UnsupportedSpec
from modules.linmodel import Dataset
from modules.processes import (
    ErrorProcessSpec,
    labels_from_sizes,
    overlap_square_sum,
    uniform_blocks,
)
from modules.rng import make_stream

logger = logging.getLogger(__name__)

KAPPA_LIMIT = 0.5
CLUSTER_BY = ("group", "effect", "error0", "unit")


class AssignmentLevel(Enum):
    UNIT = "unit"
    GROUP = "group"


@dataclass(frozen=True)
class TreatmentSpec:
    """
    处理变量分布：bernoulli(p) / normal(mu, sigma) / discrete(values, probs)
    level 为 group 时每组抽一次并复制到组内所有个体
    """
    level: AssignmentLevel = AssignmentLevel.UNIT
    dist: str = "bernoulli"
    p: float = 0.5
    mu: float = 0.0
    sigma: float = 1.0
    values: Tuple[float, ...] = ()
    probs: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "level", AssignmentLevel(self.level))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(q) for q in self.probs))
        self.validate()

    def validate(self) -> None:
        if self.dist == "bernoulli":
            if not 0.0 < self.p < 1.0:
                raise InvalidSpec(f"Bernoulli 需要 p ∈ (0,1)，当前 p={self.p}")
        elif self.dist == "normal":
            if self.sigma <= 0:
                raise InvalidSpec("正态处理变量的方差必须为正")
        elif self.dist == "discrete":
            if len(self.values) != len(self.probs) or not self.values:
                raise InvalidSpec("离散分布的 values 与 probs 长度必须一致且非空")
            if min(self.probs) < 0 or abs(sum(self.probs) - 1.0) > 1e-12:
                raise InvalidSpec("离散分布的概率必须非负且和为 1")
            if self.moments()[1] <= 0:
                raise InvalidSpec("处理变量方差为零（退化分布）")
        else:
            raise InvalidSpec(f"未知的处理变量分布: {self.dist}")

    def moments(self) -> Tuple[float, float, float, float]:
        """(μ_d, σ²_d, 三阶中心矩, 四阶中心矩)"""
        if self.dist == "bernoulli":
            p = self.p
            var = p * (1 - p)
            return p, var, var * (1 - 2 * p), var * (1 - 3 * p + 3 * p * p)
        if self.dist == "normal":
            s2 = self.sigma ** 2
            return self.mu, s2, 0.0, 3.0 * s2 * s2
        v = np.asarray(self.values)
        q = np.asarray(self.probs)
        mu = float(q @ v)
        c = v - mu
        return mu, float(q @ c ** 2), float(q @ c ** 3), float(q @ c ** 4)

    @property
    def is_binary(self) -> bool:
        if self.dist == "bernoulli":
            return True
        if self.dist == "discrete":
            return set(self.values) <= {0.0, 1.0}
        return False

    def draw(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if self.dist == "bernoulli":
            return (rng.random(size) < self.p).astype(float)
        if self.dist == "normal":
            return self.mu + self.sigma * rng.standard_normal(size)
        return rng.choice(np.asarray(self.values), size=size, p=np.asarray(self.probs))


class EffectKind(Enum):
    CONSTANT = "constant"
    HETERO_IID = "iid"
    HETERO_CLUSTERED = "clustered"


@dataclass(frozen=True)
class EffectSpec:
    """
    处理效应 τ_i = y_i(1) - y_i(0)
    constant: τ_i = tau
    iid: τ_i = mean_tau + N(0, var_tau)
    clustered: τ_i = mean_tau + b_c + w_i，b_c ~ N(0, var_between)，w_i ~ N(0, var_within)
    簇由 cluster_sizes（和为 n）或统一的 cluster_size 给出，均为连续块
    """
    kind: EffectKind = EffectKind.CONSTANT
    tau: float = 1.0
    mean_tau: float = 1.0
    var_tau: float = 0.0
    var_between: float = 0.0
    var_within: float = 0.0
    cluster_sizes: Tuple[int, ...] = ()
    cluster_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", EffectKind(self.kind))
        object.__setattr__(self, "cluster_sizes", tuple(int(s) for s in self.cluster_sizes))
        if min(self.var_tau, self.var_between, self.var_within) < 0:
            raise InvalidSpec("处理效应的方差不能为负")
        if self.cluster_size < 1 or any(s < 1 for s in self.cluster_sizes):
            raise InvalidSpec("处理效应簇的大小必须为正")

    @property
    def mean(self) -> float:
        return self.tau if self.kind is EffectKind.CONSTANT else self.mean_tau

    @property
    def is_constant(self) -> bool:
        if self.kind is EffectKind.CONSTANT:
            return True
        if self.kind is EffectKind.HETERO_IID:
            return self.var_tau == 0
        return self.var_between == 0 and self.var_within == 0

    def cluster_labels(self, n: int) -> np.ndarray:
        if self.cluster_sizes:
            if sum(self.cluster_sizes) != n:
                raise InvalidSpec(f"处理效应簇大小之和 {sum(self.cluster_sizes)} 不等于 n={n}")
            return labels_from_sizes(self.cluster_sizes)
        return uniform_blocks(n, self.cluster_size)

    def block_variances(self, n: int, block_labels: Optional[np.ndarray] = None) -> np.ndarray:
        """每个连续块上 Var(Σ τ_i)"""
        if block_labels is None:
            block_labels = np.arange(n)
        sizes = np.bincount(block_labels).astype(float)
        if self.kind is EffectKind.CONSTANT:
            return np.zeros_like(sizes)
        if self.kind is EffectKind.HETERO_IID:
            return self.var_tau * sizes
        overlap = overlap_square_sum(block_labels, self.cluster_labels(n))
        return self.var_between * overlap + self.var_within * sizes

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind is EffectKind.CONSTANT:
            return np.full(n, self.tau)
        if self.kind is EffectKind.HETERO_IID:
            return self.mean_tau + np.sqrt(self.var_tau) * rng.standard_normal(n)
        labels = self.cluster_labels(n)
        shared = np.sqrt(self.var_between) * rng.standard_normal(int(labels[-1]) + 1)
        return self.mean_tau + shared[labels] + np.sqrt(self.var_within) * rng.standard_normal(n)


@dataclass(frozen=True)
class IvSpec:
    """
    第一阶段 D = V·rho + W·alpha + eta；工具变量 V 按 ScenarioSpec.treatment 抽取
    endogeneity 为 eta 进入结构误差的载荷（eps = u + endogeneity·eta）
    """
    rho: float = 1.0
    eta: ErrorProcessSpec = field(default_factory=ErrorProcessSpec)
    endogeneity: float = 0.0


@dataclass(frozen=True)
class ScenarioSpec:
    """完整的 DGP 描述"""
    name: str = "custom"
    n: int = 1000
    error0: ErrorProcessSpec = field(default_factory=ErrorProcessSpec)
    treatment: TreatmentSpec = field(default_factory=TreatmentSpec)
    effect: EffectSpec = field(default_factory=EffectSpec)
    controls: Tuple[ErrorProcessSpec, ...] = ()
    gamma_true: Tuple[float, ...] = (0.0,)
    group_sizes: Tuple[int, ...] = ()
    group_size: int = 0
    alpha_dw: Tuple[float, ...] = ()
    iv: Optional[IvSpec] = None
    methods: Tuple[str, ...] = ("Classic", "HC0")
    cluster_by: str = "group"
    cluster_adjust: bool = False
    hac_bandwidth: Optional[int] = None
    level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "gamma_true", tuple(float(g) for g in self.gamma_true))
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        object.__setattr__(self, "alpha_dw", tuple(float(a) for a in self.alpha_dw))
        object.__setattr__(self, "methods", tuple(self.methods))
        self.validate()

    @property
    def d_w(self) -> int:
        """控制变量个数，含隐含的常数列"""
        return 1 + len(self.controls)

    @property
    def beta_true(self) -> float:
        """β ≡ E[τ_i]"""
        return self.effect.mean

    @property
    def is_grouped(self) -> bool:
        return bool(self.group_sizes) or self.group_size > 0

    def group_labels(self) -> Optional[np.ndarray]:
        if self.group_sizes:
            return labels_from_sizes(self.group_sizes)
        if self.group_size > 0:
            return uniform_blocks(self.n, self.group_size)
        return None

    def kappa_ratio(self) -> float:
        """κ_n / n = sqrt(Σ n_j²) / n"""
        labels = self.group_labels()
        sizes = np.ones(self.n) if labels is None else np.bincount(labels).astype(float)
        return float(np.sqrt(np.sum(sizes ** 2)) / self.n)

    def validate(self) -> None:
        if self.n < self.d_w + 2:
            raise InvalidSpec(f"样本量 n={self.n} 过小（d_w={self.d_w}）")
        if len(self.gamma_true) != self.d_w:
            raise InvalidSpec(f"gamma_true 长度应为 {self.d_w}（含截距），当前 {len(self.gamma_true)}")
        if self.group_sizes and sum(self.group_sizes) != self.n:
            raise InvalidSpec(f"组大小之和 {sum(self.group_sizes)} 不等于 n={self.n}")
        grouped = self.treatment.level is AssignmentLevel.GROUP
        if grouped != self.is_grouped:
            raise InvalidSpec("组结构当且仅当处理在组级分配时给出")
        if grouped and self.kappa_ratio() >= KAPPA_LIMIT:
            raise InvalidSpec(f"κ_n/n = {self.kappa_ratio():.3f} 过大（须 < {KAPPA_LIMIT}）")
        if grouped and (self.alpha_dw or self.iv is not None):
            raise InvalidSpec("组级分配不支持 alpha_dw 或工具变量")
        if self.alpha_dw and len(self.alpha_dw) != self.d_w:
            raise InvalidSpec(f"alpha_dw 长度应为 {self.d_w}")
        continuous_d = bool(self.alpha_dw) or self.iv is not None or not self.treatment.is_binary
        if continuous_d and not self.effect.is_constant:
            raise UnsupportedSpec("异质处理效应仅支持二元处理变量")
        if not 0.0 < self.level < 1.0:
            raise InvalidSpec(f"置信水平须在 (0,1) 内: {self.level}")
        self._validate_methods()

    def _validate_methods(self) -> None:
        # variance 依赖本模块
        from modules.variance import VarianceMethod

        if not self.methods:
            raise InvalidSpec("methods 不能为空")
        methods = {VarianceMethod.parse(m) for m in self.methods}
        if self.cluster_by not in CLUSTER_BY:
            raise InvalidSpec(f"未知的 cluster_by: {self.cluster_by}（可选 {', '.join(CLUSTER_BY)}）")
        clustered = methods & {VarianceMethod.CLUSTER_LZ, VarianceMethod.MOULTON}
        if clustered and self.cluster_by == "group" and not self.is_grouped:
            names = ", ".join(sorted(m.value for m in clustered))
            raise InvalidSpec(f"{names} 按组聚类，但场景没有组结构；请设置 cluster_by")
        if VarianceMethod.TSLS in methods and self.iv is None:
            raise InvalidSpec("Tsls 需要工具变量（iv）")


@dataclass(frozen=True)
class TruthRecord:
    """由设定闭式计算的真值，供 oracle 方差与验收比较使用"""
    beta_true: float
    n: int
    mu_d: float
    sigma2_d: float
    sigma2_eps: float
    mu_A: Tuple[float, float]
    sigma2_e1: float
    sigma2_e2: float
    te_first: float
    te_adjust: float
    S2_eps: float
    S2_e1: float
    S2_e2: float
    kappa_ratio: float
    rho_iv: float = float("nan")
    sigma2_v: float = float("nan")


@dataclass(frozen=True)
class Draw:
    """一次模拟的全部组成部分（便于核对恒等式）"""
    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray
    tau: np.ndarray
    epsilon: np.ndarray


def gen_errors(spec: ErrorProcessSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return spec.simulate(n, rng)


def gen_treatment(
    spec: TreatmentSpec,
    n: int,
    group_sizes: Optional[Tuple[int, ...]],
    rng: np.random.Generator,
) -> np.ndarray:
    """个体级：n 次独立抽样；组级：n_g 次抽样并复制到组内"""
    if spec.level is AssignmentLevel.UNIT:
        return spec.draw(n, rng)
    if not group_sizes or sum(group_sizes) != n:
        raise InvalidSpec("组级分配需要和为 n 的组大小")
    per_group = spec.draw(len(group_sizes), rng)
    return np.repeat(per_group, group_sizes)


def gen_potential_outcomes(
    spec: ScenarioSpec,
    d: np.ndarray,
    baseline: np.ndarray,
    rng: np.random.Generator,
    W: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    返回 (y0, y1, y, epsilon, tau)
    y0 = Wγ + baseline，y1 = y0 + τ，y = y0 + d·τ
    epsilon = baseline + d·(τ - E[τ])，满足 epsilon = y - dβ - Wγ
    """
    binary = bool(np.all((d == 0.0) | (d == 1.0)))
    if not spec.effect.is_constant and not binary:
        raise UnsupportedSpec("异质处理效应要求二元处理变量")
    n = d.shape[0]
    tau = spec.effect.draw(n, rng)
    y0 = W @ np.asarray(spec.gamma_true) + baseline
    y1 = y0 + tau
    y = y0 + d * tau
    epsilon = baseline + d * (tau - spec.beta_true)
    return y0, y1, y, epsilon, tau


def _build_controls(spec: ScenarioSpec, seed: int) -> np.ndarray:
    cols = [np.ones(spec.n)]
    for k, ctrl in enumerate(spec.controls):
        cols.append(gen_errors(ctrl, spec.n, make_stream(seed, f"controls.{k}")))
    return np.column_stack(cols)


def draw_components(spec: ScenarioSpec, seed: int) -> Draw:
    n = spec.n
    labels = spec.group_labels()
    sizes = tuple(np.bincount(labels)) if labels is not None else None

    W = _build_controls(spec, seed)
    d = gen_treatment(spec.treatment, n, sizes, make_stream(seed, "treatment"))
    baseline = gen_errors(spec.error0, n, make_stream(seed, "baseline"))
    V = None
    if spec.iv is not None:
        # 随机化的是工具变量，D 由第一阶段生成
        V = d
        eta = gen_errors(spec.iv.eta, n, make_stream(seed, "iv"))
        d = spec.iv.rho * V + eta
        baseline = baseline + spec.iv.endogeneity * eta
    if spec.alpha_dw:
        d = d + W @ np.asarray(spec.alpha_dw)

    y0, y1, y, epsilon, tau = gen_potential_outcomes(
        spec, d, baseline, make_stream(seed, "effect"), W
    )
    dataset = Dataset(Y=y, D=d, W=W, group_ids=labels, V=V)
    return Draw(dataset=dataset, y0=y0, y1=y1, tau=tau, epsilon=epsilon)


def truth_record(spec: ScenarioSpec) -> TruthRecord:
    """
    闭式真值。记 c = d - μ，a2 = c·d - σ²_d（σ(d) = (1, d) 映射下 A_i 的第二分量）：
        E[a2²] = m4 + 2μ m3 + μ² m2 - m2²，E[c²d²] = m4 + 2μ m3 + μ² m2
    基线误差 u 与处理效应 τ 相互独立
    """
    n = spec.n
    mu, m2, m3, m4 = spec.treatment.moments()
    e_c2d2 = m4 + 2 * mu * m3 + mu * mu * m2
    e_a2sq = e_c2d2 - m2 * m2

    var_u = spec.error0.block_variances(n)
    if spec.iv is not None:
        # u 与 eta 来自独立的随机流
        var_u = var_u + spec.iv.endogeneity ** 2 * spec.iv.eta.block_variances(n)
    var_t = spec.effect.block_variances(n)
    all_in_one = np.zeros(n, dtype=np.int64)
    total_t = float(spec.effect.block_variances(n, all_in_one)[0])

    sigma2_eps = float(np.mean(var_u) + (m2 + mu * mu) * np.mean(var_t))
    sigma2_e1 = float(np.mean(m2 * var_u + e_a2sq * var_t))
    sigma2_e2 = m2 * m2 * total_t / n
    te_first = float(np.mean(m2 * var_u + e_c2d2 * var_t)) / (m2 * m2)
    te_adjust = (total_t - float(np.sum(var_t))) / n

    labels = spec.group_labels()
    if labels is None:
        S2_eps, S2_e1 = sigma2_eps, sigma2_e1
    else:
        U = spec.error0.block_variances(n, labels)
        if spec.iv is not None:
            U = U + spec.iv.endogeneity ** 2 * spec.iv.eta.block_variances(n, labels)
        T = spec.effect.block_variances(n, labels)
        S2_eps = float(np.sum(U + (m2 + mu * mu) * T)) / n
        S2_e1 = float(np.sum(m2 * U + e_a2sq * T)) / n

    return TruthRecord(
        beta_true=spec.beta_true,
        n=n,
        mu_d=mu,
        sigma2_d=m2,
        sigma2_eps=sigma2_eps,
        mu_A=(0.0, m2),
        sigma2_e1=sigma2_e1,
        sigma2_e2=sigma2_e2,
        te_first=te_first,
        te_adjust=te_adjust,
        S2_eps=S2_eps,
        S2_e1=S2_e1,
        S2_e2=sigma2_e2,
        kappa_ratio=spec.kappa_ratio(),
        rho_iv=spec.iv.rho if spec.iv is not None else float("nan"),
        sigma2_v=m2 if spec.iv is not None else float("nan"),
    )


def assemble(spec: ScenarioSpec, seed: int) -> Tuple[Dataset, TruthRecord]:
    """按 seed 生成数据集并附上闭式真值"""
    draw = draw_components(spec, seed)
    return draw.dataset, truth_record(spec)

