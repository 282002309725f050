import pytest

from modules.config import (
    RUN_KEYS,
    RunConfig,
    apply_overrides,
    load_scenario,
    load_settings,
    parse_methods,
    parse_set,
    spec_to_flat,
)
from modules.dgp import AssignmentLevel, EffectKind, ScenarioSpec
from modules.errors import ConfigError
from modules.presets import get_preset, list_presets


def test_nested_overrides():
    spec = apply_overrides(
        ScenarioSpec(),
        {
            "n": "500",
            "error0.kind": "ar1",
            "error0.rho": "0.7",
            "treatment.p": "0.2",
            "effect.kind": "iid",
            "effect.var_tau": "4",
            "methods": "Classic, HC1",
            "hac_bandwidth": "auto",
            "cluster_adjust": "yes",
        },
    )
    assert spec.n == 500
    assert spec.error0.kind == "ar1" and spec.error0.rho == 0.7
    assert spec.treatment.p == 0.2
    assert spec.effect.kind is EffectKind.HETERO_IID
    assert spec.methods == ("Classic", "HC1")
    assert spec.hac_bandwidth is None
    assert spec.cluster_adjust is True


def test_controls_extend_together_with_gamma():
    spec = apply_overrides(
        ScenarioSpec(),
        {"controls.1.kind": "ar1", "controls.1.rho": "0.5", "gamma_true": "1,0,2"},
    )
    assert len(spec.controls) == 2
    assert spec.controls[0].kind == "iid"
    assert spec.controls[1].rho == 0.5
    assert spec.gamma_true == (1.0, 0.0, 2.0)


def test_iv_overrides_create_first_stage():
    spec = apply_overrides(ScenarioSpec(), {"iv.rho": "2", "iv.eta.sigma": "0.5"})
    assert spec.iv is not None
    assert spec.iv.rho == 2.0
    assert spec.iv.eta.sigma == 0.5


def test_group_and_edge_values():
    spec = apply_overrides(
        ScenarioSpec(n=40),
        {"treatment.level": "group", "group_sizes": "5,5,5,5,5,5,5,5", "error0.kind": "network_ma", "error0.edges": "0-1,2-3"},
    )
    assert spec.treatment.level is AssignmentLevel.GROUP
    assert spec.group_sizes == (5,) * 8
    assert spec.error0.edges == ((0, 1), (2, 3))


@pytest.mark.parametrize(
    "overrides",
    [
        {"nope": "1"},
        {"error0.nope": "1"},
        {"controls.x.kind": "ar1"},
        {"iv.eta.sigma.extra": "1"},
        {"error0": "ar1"},
        {"n": "many"},
        {"cluster_adjust": "maybe"},
        {"error0.edges": "0:1"},
        {"treatment.level": "region"},
        {"methods": "Classic,Bogus"},
    ],
)
def test_bad_overrides_raise_config_error(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(ScenarioSpec(), overrides)


@pytest.mark.parametrize("name", [p.name for p in list_presets()])
def test_flat_form_reproduces_preset(name):
    spec = get_preset(name).spec
    assert apply_overrides(ScenarioSpec(), spec_to_flat(spec)) == spec


def test_parse_set():
    assert parse_set(["n=10", " error0.rho = 0.3 ", "name=a=b"]) == {"n": "10", "error0.rho": "0.3", "name": "a=b"}
    with pytest.raises(ConfigError):
        parse_set(["n"])


def test_load_scenario_precedence(tmp_path):
    path = tmp_path / "scenario.env"
    path.write_text("preset=strong-exog-ar1\nn=500\nlevel=0.9\n# 注释\n")
    spec, run, layers = load_scenario(config_path=str(path), sets=["n=600"], flags={"n": "700", "level": None})
    assert spec.n == 700
    assert spec.level == 0.9
    assert spec.error0.rho == 0.7
    assert len(layers) == 4
    spec, run, layers = load_scenario(config_path=str(path), sets=["n=600"])
    assert run == RunConfig()
    assert spec.n == 600
    assert len(layers) == 3


def test_load_scenario_defaults_and_missing_file(tmp_path):
    spec, run, layers = load_scenario()
    assert spec == ScenarioSpec()
    assert run == RunConfig()
    assert layers == ["默认场景"]
    with pytest.raises(ConfigError):
        load_scenario(config_path=str(tmp_path / "missing.env"))
    with pytest.raises(ConfigError):
        load_scenario(preset="no-such-preset")


def test_run_keys_are_split_from_scenario(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("preset=hetero-iid-te\nn=300\nR=50\nseed=9\nparallelism=2\nt_crit=yes\nout=results\n")
    spec, run, _ = load_scenario(config_path=str(path), sets=["seed=11"], flags={"R": "20"})
    assert spec.n == 300
    assert run == RunConfig(R=20, seed=11, parallelism=2, out="results", t_crit=True)
    assert set(RUN_KEYS).isdisjoint(spec_to_flat(spec))


@pytest.mark.parametrize("items", [["R=0"], ["seed=x"], ["parallelism=0"], ["dump_data=perhaps"]])
def test_bad_run_values_raise_config_error(items):
    with pytest.raises(ConfigError):
        load_scenario(preset="strong-exog-ar1", sets=items)


def test_parse_methods_canonicalizes_aliases():
    assert parse_methods("methods", "hc0, cluster ,moulton,2sls") == ("HC0", "ClusterLZ", "Moulton", "Tsls")
    with pytest.raises(ConfigError):
        parse_methods("methods", "HC0,HC7")


def test_load_settings(monkeypatch):
    monkeypatch.setenv("RANDSE_THREADS", "3")
    monkeypatch.setenv("RANDSE_LOG_LEVEL", "debug")
    monkeypatch.setenv("RANDSE_OUT_DIR", "results")
    settings = load_settings()
    assert settings.threads == 3
    assert settings.log_level == "DEBUG"
    assert settings.out_dir == "results"
    monkeypatch.setenv("RANDSE_THREADS", "lots")
    with pytest.raises(ConfigError):
        load_settings()
