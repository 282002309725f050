import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.dgp import (
    AssignmentLevel,
    EffectKind,
    EffectSpec,
    IvSpec,
    ScenarioSpec,
    TreatmentSpec,
    assemble,
    draw_components,
    gen_potential_outcomes,
    gen_treatment,
    truth_record,
)
from modules.errors import InvalidSpec, UnsupportedSpec
from modules.presets import get_preset
from modules.processes import ErrorProcessSpec
from modules.rng import make_stream


def test_assemble_is_deterministic(small_spec):
    a, _ = assemble(small_spec, 99)
    b, _ = assemble(small_spec, 99)
    c, _ = assemble(small_spec, 100)
    assert_array_equal(a.Y, b.Y)
    assert_array_equal(a.W, b.W)
    assert not np.array_equal(a.Y, c.Y)


def test_structural_identities_hold(small_spec):
    draw = draw_components(small_spec, 5)
    data = draw.dataset
    gamma = np.asarray(small_spec.gamma_true)
    assert_allclose(data.Y - data.D * small_spec.beta_true - data.W @ gamma, draw.epsilon, atol=1e-12)
    assert_allclose(draw.y1 - draw.y0, draw.tau, atol=1e-12)
    assert_allclose(data.W[:, 0], 1.0)


def test_heterogeneous_effect_identity():
    spec = ScenarioSpec(
        n=300,
        effect=EffectSpec(kind=EffectKind.HETERO_IID, mean_tau=2.0, var_tau=1.0),
    )
    draw = draw_components(spec, 11)
    d = draw.dataset.D
    assert_allclose(draw.dataset.Y, np.where(d == 1.0, draw.y1, draw.y0), atol=1e-12)
    assert_allclose(draw.dataset.Y - 2.0 * d, draw.epsilon, atol=1e-12)


def test_group_assignment_is_constant_within_groups():
    spec = ScenarioSpec(
        n=60,
        treatment=TreatmentSpec(level=AssignmentLevel.GROUP, p=0.5),
        group_sizes=(10,) * 6,
    )
    data, _ = assemble(spec, 1)
    for g in range(6):
        assert np.unique(data.D[data.group_ids == g]).size == 1


def test_gen_treatment_group_sizes():
    spec = TreatmentSpec(level=AssignmentLevel.GROUP, dist="discrete", values=(1.0, 2.0), probs=(0.5, 0.5))
    d = gen_treatment(spec, 5, (2, 3), make_stream(0, "treatment"))
    assert d[0] == d[1] and d[2] == d[3] == d[4]
    with pytest.raises(InvalidSpec):
        gen_treatment(spec, 5, (2, 2), make_stream(0, "treatment"))


def test_bernoulli_moments():
    mu, m2, m3, m4 = TreatmentSpec(p=0.2).moments()
    assert_allclose([mu, m2, m3, m4], [0.2, 0.16, 0.16 * 0.6, 0.16 * (1 - 0.6 + 0.12)])


def test_discrete_moments_match_bernoulli():
    assert_allclose(
        TreatmentSpec(dist="discrete", values=(0.0, 1.0), probs=(0.7, 0.3)).moments(),
        TreatmentSpec(p=0.3).moments(),
    )


def test_hetero_effect_requires_binary_treatment():
    with pytest.raises(UnsupportedSpec):
        ScenarioSpec(
            n=50,
            treatment=TreatmentSpec(dist="normal"),
            effect=EffectSpec(kind=EffectKind.HETERO_IID, var_tau=1.0),
        )
    spec = ScenarioSpec(n=4, effect=EffectSpec(kind=EffectKind.HETERO_IID, var_tau=1.0))
    with pytest.raises(UnsupportedSpec):
        gen_potential_outcomes(spec, np.full(4, 0.5), np.zeros(4), make_stream(0, "effect"), np.ones((4, 1)))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=10, treatment=TreatmentSpec(level=AssignmentLevel.GROUP), group_sizes=(5, 5)),
        dict(n=10, treatment=TreatmentSpec(level=AssignmentLevel.GROUP)),
        dict(n=10, group_size=2),
        dict(n=10, gamma_true=(0.0, 1.0)),
        dict(n=2),
        dict(n=10, level=1.0),
        dict(n=20, treatment=TreatmentSpec(level=AssignmentLevel.GROUP), group_size=2, alpha_dw=(0.0,)),
        dict(n=20, treatment=TreatmentSpec(level=AssignmentLevel.GROUP), group_size=2, iv=IvSpec()),
        dict(n=10, methods=("Classic", "Bogus")),
        dict(n=10, methods=()),
        dict(n=10, methods=("ClusterLZ",)),
        dict(n=10, methods=("Moulton",)),
        dict(n=10, methods=("Tsls",)),
        dict(n=10, methods=("HC0",), cluster_by="region"),
    ],
)
def test_invalid_scenarios(kwargs):
    with pytest.raises(InvalidSpec):
        ScenarioSpec(**kwargs)


def test_truth_record_iid_constant():
    spec = ScenarioSpec(n=100, error0=ErrorProcessSpec(sigma=2.0), treatment=TreatmentSpec(p=0.25))
    truth = truth_record(spec)
    assert_allclose(truth.sigma2_eps, 4.0)
    assert_allclose(truth.sigma2_d, 0.1875)
    assert truth.sigma2_e2 == 0.0
    assert truth.mu_A == (0.0, 0.1875)
    assert_allclose(truth.kappa_ratio, np.sqrt(100) / 100)


def test_truth_record_clustered_effect_long_run_term():
    spec = ScenarioSpec(
        n=40,
        effect=EffectSpec(kind=EffectKind.HETERO_CLUSTERED, var_between=2.0, var_within=0.0, cluster_size=10),
    )
    truth = truth_record(spec)
    # Var(Σ τ) = 2·4·10² ；σ²_e2 = σ_d⁴·Var(Στ)/n
    assert_allclose(truth.sigma2_e2, 0.0625 * 800.0 / 40)
    assert_allclose(truth.te_adjust, (800.0 - 40 * 2.0) / 40)


def test_iv_first_stage_generation():
    spec = ScenarioSpec(
        n=50,
        iv=IvSpec(rho=2.0, eta=ErrorProcessSpec(sigma=0.0), endogeneity=0.0),
    )
    data, truth = assemble(spec, 3)
    assert_allclose(data.D, 2.0 * data.V)
    assert set(np.unique(data.V)) <= {0.0, 1.0}
    assert truth.rho_iv == 2.0
    assert_allclose(truth.sigma2_v, 0.25)


def test_iv_endogeneity_enters_error_variance():
    spec = ScenarioSpec(n=50, iv=IvSpec(rho=1.0, eta=ErrorProcessSpec(sigma=1.0), endogeneity=0.5))
    assert_allclose(truth_record(spec).sigma2_eps, 1.25)


def test_controls_get_independent_streams():
    spec = ScenarioSpec(
        n=100,
        controls=(ErrorProcessSpec(), ErrorProcessSpec()),
        gamma_true=(0.0, 0.0, 0.0),
    )
    data, _ = assemble(spec, 0)
    assert not np.array_equal(data.W[:, 1], data.W[:, 2])


def test_simulated_error_variance_matches_truth():
    spec = dataclasses.replace(get_preset("strong-exog-ar1").spec, n=100_000)
    draw = draw_components(spec, 5)
    truth = truth_record(spec)
    rho = spec.error0.rho
    # 平稳 AR(1) 样本方差的标准误
    sd = truth.sigma2_eps * np.sqrt(2 * (1 + rho ** 2) / ((1 - rho ** 2) * spec.n))
    assert_allclose(truth.sigma2_eps, 1.0 / (1.0 - rho ** 2))
    assert abs(draw.epsilon.var() - truth.sigma2_eps) < 4 * sd
