"""
内置场景。每个场景附带验收准则 (指标, 方法, 下界, 上界)，供 simulate --assert 使用
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from modules.dgp import (
    AssignmentLevel,
    EffectKind,
    EffectSpec,
    IvSpec,
    ScenarioSpec,
    TreatmentSpec,
)
from modules.errors import ConfigError
from modules.processes import ErrorProcessSpec

logger = logging.getLogger(__name__)

COVERAGE_BAND = (0.93, 0.965)
UNDERCOVERAGE = (0.0, 0.93)
ORACLE_Z = (-3.0, 3.0)


@dataclass(frozen=True)
class Criterion:
    """
    metric:
        coverage        该方法的覆盖率
        variance_ratio  mean(se²)·n / oracle
        consistency     mean(se²)·n / (σ²_ε/σ²_d)
        oracle_z        (empirical_asy_var - oracle) / MC 标准误
    """
    label: str
    metric: str
    method: Optional[str]
    lo: float
    hi: float


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    spec: ScenarioSpec
    criteria: Tuple[Criterion, ...] = ()
    R: int = 4000


def _strong_exog_ar1() -> Preset:
    spec = ScenarioSpec(
        name="strong-exog-ar1",
        n=2000,
        error0=ErrorProcessSpec(kind="ar1", rho=0.7, sigma=1.0),
        treatment=TreatmentSpec(dist="bernoulli", p=0.5),
        effect=EffectSpec(kind=EffectKind.CONSTANT, tau=1.0),
        controls=(
            ErrorProcessSpec(kind="ar1", rho=0.5),
            ErrorProcessSpec(kind="ar1", rho=0.8),
        ),
        gamma_true=(1.0, 0.5, -0.5),
        methods=("Classic", "HC0", "HC1", "HacNW"),
    )
    return Preset(
        name=spec.name,
        description="AR(1) 误差 (ρ=0.7)、i.i.d. Bernoulli(0.5) 处理、常数效应、两个自相关控制变量",
        spec=spec,
        criteria=(
            Criterion("classic_coverage", "coverage", "Classic", 0.935, 0.965),
            Criterion("classic_variance_ratio", "variance_ratio", "Classic", 0.93, 1.07),
            Criterion("classic_consistency", "consistency", "Classic", 0.95, 1.05),
            Criterion("oracle_match", "oracle_z", None, *ORACLE_Z),
        ),
    )


def _hetero_iid_te() -> Preset:
    # p < 0.5 时 HC0 的极限 1/(p(1-p)) + v/p 大于经典公式的 1/(p(1-p)) + v/(1-p)
    spec = ScenarioSpec(
        name="hetero-iid-te",
        n=2000,
        error0=ErrorProcessSpec(kind="iid", sigma=1.0),
        treatment=TreatmentSpec(dist="bernoulli", p=0.2),
        effect=EffectSpec(kind=EffectKind.HETERO_IID, mean_tau=1.0, var_tau=4.0),
        methods=("Classic", "HC0", "HC1"),
    )
    return Preset(
        name=spec.name,
        description="i.i.d. 异质处理效应 (Var τ = 4)、Bernoulli(0.2) 处理",
        spec=spec,
        criteria=(
            Criterion("hc0_coverage", "coverage", "HC0", *COVERAGE_BAND),
            Criterion("classic_undercoverage", "coverage", "Classic", *UNDERCOVERAGE),
            Criterion("oracle_match", "oracle_z", None, *ORACLE_Z),
        ),
    )


def _hetero_clustered_te() -> Preset:
    spec = ScenarioSpec(
        name="hetero-clustered-te",
        n=2000,
        error0=ErrorProcessSpec(kind="cluster_re", sigma_between=0.5, sigma_within=1.0, cluster_size=50),
        treatment=TreatmentSpec(dist="bernoulli", p=0.5),
        effect=EffectSpec(
            kind=EffectKind.HETERO_CLUSTERED,
            mean_tau=1.0,
            var_between=4.0,
            var_within=0.25,
            cluster_size=10,
        ),
        methods=("Classic", "HC0", "ClusterLZ"),
        cluster_by="effect",
    )
    return Preset(
        name=spec.name,
        description="处理效应按 10 人一簇相关（簇间方差占主导），基线误差按 50 人一簇相关",
        spec=spec,
        criteria=(
            Criterion("hc0_undercoverage", "coverage", "HC0", *UNDERCOVERAGE),
            Criterion("cluster_coverage", "coverage", "ClusterLZ", *COVERAGE_BAND),
            Criterion("oracle_match", "oracle_z", None, *ORACLE_Z),
        ),
    )


def _group_assign_crosscorr() -> Preset:
    spec = ScenarioSpec(
        name="group-assign-crosscorr",
        n=2000,
        error0=ErrorProcessSpec(kind="ar1", rho=0.5, sigma=1.0),
        treatment=TreatmentSpec(level=AssignmentLevel.GROUP, dist="bernoulli", p=0.5),
        effect=EffectSpec(kind=EffectKind.CONSTANT, tau=1.0),
        group_size=5,
        methods=("Classic", "HC0", "ClusterLZ"),
        cluster_by="group",
    )
    return Preset(
        name=spec.name,
        description="5 人一组的组级分配，AR(1) 误差跨越组边界相关",
        spec=spec,
        criteria=(
            Criterion("cluster_coverage", "coverage", "ClusterLZ", *COVERAGE_BAND),
            Criterion("oracle_match", "oracle_z", None, *ORACLE_Z),
        ),
    )


def _iv_first_stage() -> Preset:
    spec = ScenarioSpec(
        name="iv-first-stage",
        n=2000,
        error0=ErrorProcessSpec(kind="iid", sigma=1.0),
        treatment=TreatmentSpec(dist="bernoulli", p=0.5),
        effect=EffectSpec(kind=EffectKind.CONSTANT, tau=1.0),
        iv=IvSpec(rho=1.0, eta=ErrorProcessSpec(kind="iid", sigma=1.0), endogeneity=0.5),
        methods=("Classic", "Tsls"),
    )
    return Preset(
        name=spec.name,
        description="随机化工具变量 V，D = V + η，η 以 0.5 的载荷进入结构误差",
        spec=spec,
        criteria=(
            Criterion("tsls_coverage", "coverage", "Tsls", *COVERAGE_BAND),
            Criterion("oracle_match", "oracle_z", None, *ORACLE_Z),
        ),
    )


PRESETS: Dict[str, Preset] = {
    p.name: p
    for p in (
        _strong_exog_ar1(),
        _hetero_iid_te(),
        _hetero_clustered_te(),
        _group_assign_crosscorr(),
        _iv_first_stage(),
    )
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ConfigError(f"未知的预设场景: {name}（可选: {', '.join(PRESETS)}）")
    return PRESETS[name]


def list_presets() -> List[Preset]:
    return list(PRESETS.values())
