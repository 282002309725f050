import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from modules.dgp import ScenarioSpec, assemble, truth_record
from modules.errors import AllReplicationsFailed, EmptyRecords, ExcessiveExclusions
from modules.montecarlo import (
    MethodOutcome,
    ReplicationRecord,
    acceptance_checks,
    coverage,
    run_replication,
    run_scenario,
    summarize,
)
from modules.presets import get_preset, list_presets
from modules.processes import ErrorProcessSpec
from modules.rng import replication_seed
from modules.variance import VarianceEstimate, VarianceMethod, oracle_t1


def _record(i, lo, hi, se=1.0):
    outcome = MethodOutcome(beta_hat=(lo + hi) / 2, se=se, ci_lo=lo, ci_hi=hi, covered=lo <= 1.0 <= hi,
                            rejected_at_5pct=not lo <= 1.0 <= hi)
    return ReplicationRecord(rep_index=i, beta_hat=(lo + hi) / 2, methods={"Classic": outcome})


def test_coverage_counting():
    covering = [_record(i, 0.0, 2.0) for i in range(10)]
    missing = [_record(i, 2.0, 3.0) for i in range(10)]
    assert coverage(covering, 1.0, "Classic") == 1.0
    assert coverage(missing, 1.0, "Classic") == 0.0
    assert coverage(covering[:5] + missing[5:], 1.0, "Classic") == 0.5
    with pytest.raises(EmptyRecords):
        coverage([], 1.0, "Classic")
    with pytest.raises(EmptyRecords):
        coverage(covering, 1.0, "HC0")


def test_run_replication_is_deterministic(small_spec):
    assert run_replication(small_spec, 7, 3) == run_replication(small_spec, 7, 3)
    assert run_replication(small_spec, 7, 3) != run_replication(small_spec, 7, 4)


def test_noiseless_replication_is_flagged_degenerate():
    spec = ScenarioSpec(n=50, error0=ErrorProcessSpec(sigma=0.0))
    record = run_replication(spec, 0, 0)
    assert record.degenerate
    assert_allclose(record.beta_hat, spec.beta_true, rtol=1e-12)
    assert all(o.se < 1e-10 for o in record.methods.values())
    with pytest.raises(AllReplicationsFailed):
        run_scenario(spec, 5, 0, 1)


def test_classic_se_recomputed_from_emitted_dataset():
    spec = get_preset("strong-exog-ar1").spec
    record = run_replication(spec, 11, 2)
    data, _ = assemble(spec, replication_seed(11, 2))
    W, D, Y = data.W, data.D, data.Y
    d_breve = D - W @ np.linalg.lstsq(W, D, rcond=None)[0]
    coef = np.linalg.lstsq(data.X, Y, rcond=None)[0]
    e = Y - data.X @ coef
    s2 = e @ e / data.n
    assert_allclose(record.methods["Classic"].se, np.sqrt(s2 / (d_breve @ d_breve)), rtol=1e-8)
    assert_allclose(record.beta_hat, coef[0], rtol=1e-10)


def test_run_scenario_is_thread_count_invariant(small_spec):
    one = run_scenario(small_spec, 40, base_seed=5, parallelism=1)
    many = run_scenario(small_spec, 40, base_seed=5, parallelism=8)
    assert one == many


def test_summary_statistics(small_spec):
    result = run_scenario(small_spec, 30, base_seed=1, parallelism=2)
    betas = np.array([r.beta_hat for r in result.records])
    assert result.n_used == 30
    assert_allclose(result.beta_mean, betas.mean())
    assert_allclose(result.empirical_asy_var, small_spec.n * betas.var(ddof=1))
    for method, s in result.methods.items():
        assert 0.0 <= s.coverage <= 1.0
        assert s.mc_se_of_coverage == np.sqrt(s.coverage * (1 - s.coverage) / 30)
        se = np.array([r.methods[method].se for r in result.records])
        assert_allclose(s.variance_ratio, np.mean(se ** 2) * small_spec.n / result.oracle_asy_var)


def test_excessive_exclusions_fail_loudly(small_spec):
    truth = truth_record(small_spec)
    oracle = oracle_t1(truth.sigma2_eps, truth.sigma2_d)
    ok = [_record(i, 0.0, 2.0) for i in range(99)]
    failed = [ReplicationRecord(rep_index=99 + i, beta_hat=float("nan"), error="RankDeficient") for i in range(2)]
    with pytest.raises(ExcessiveExclusions):
        summarize(small_spec, 0, 100, ok[:98] + failed, oracle)
    spec = dataclasses.replace(small_spec, methods=("Classic",))
    result = summarize(spec, 0, 100, ok + failed[:1], oracle)
    assert result.n_failed == 1 and result.n_used == 99


def test_acceptance_checks_shape():
    preset = get_preset("strong-exog-ar1")
    spec = dataclasses.replace(preset.spec, n=300)
    result = run_scenario(spec, 20, base_seed=0, parallelism=2)
    checks = acceptance_checks(result, truth_record(spec), preset)
    assert [c[0] for c in checks] == [c.label for c in preset.criteria]
    for label, value, lo, hi, passed in checks:
        assert passed == (lo <= value <= hi)


def test_one_zero_se_marks_whole_replication_degenerate(small_spec, monkeypatch):
    def fake_estimate_all(fit, data, methods, **kwargs):
        return {
            VarianceMethod.CLASSIC: (fit.beta_hat, VarianceEstimate.of(VarianceMethod.CLASSIC, 0.0)),
            VarianceMethod.HC0: (fit.beta_hat, VarianceEstimate.of(VarianceMethod.HC0, 0.04)),
        }

    monkeypatch.setattr("modules.montecarlo.estimate_all", fake_estimate_all)
    record = run_replication(small_spec, 0, 0)
    assert record.degenerate
    assert not record.ok
    assert record.methods["HC0"].se == pytest.approx(0.2)


def test_rejection_agrees_with_t_interval_in_small_samples(small_spec):
    spec = dataclasses.replace(small_spec, n=10)
    checked = 0
    for rep in range(200):
        record = run_replication(spec, 0, rep, ci_dist="t")
        if not record.ok:
            continue
        for outcome in record.methods.values():
            assert outcome.rejected_at_5pct == (not outcome.covered)
            checked += 1
    assert checked > 300


# ------------------------------------------------------------------ 完整规模的验收（慢）


@pytest.mark.slow
@pytest.mark.parametrize("preset", [p.name for p in list_presets()])
def test_preset_acceptance(preset):
    p = get_preset(preset)
    result = run_scenario(p.spec, p.R, base_seed=2024, parallelism=4)
    checks = acceptance_checks(result, truth_record(p.spec), p)
    failed = [c for c in checks if not c[4]]
    assert not failed, failed
