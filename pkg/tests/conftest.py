import json
import os

import numpy as np
import pytest

from modules.data_io import read_dataset
from modules.dgp import EffectSpec, ScenarioSpec, TreatmentSpec
from modules.linmodel import Dataset
from modules.processes import ErrorProcessSpec

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
TINY_CSV = os.path.join(FIXTURES, "tiny.csv")


@pytest.fixture
def tiny():
    """n=6 的固定数据：(Dataset, 聚类变量)"""
    return read_dataset(TINY_CSV)


@pytest.fixture
def tiny_expected():
    with open(os.path.join(FIXTURES, "tiny_expected.json"), encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def random_data():
    """带两个非常数控制变量的随机数据，n=40"""
    rng = np.random.default_rng(12345)
    n = 40
    W = np.column_stack([np.ones(n), rng.standard_normal(n), rng.uniform(size=n)])
    D = rng.binomial(1, 0.4, size=n).astype(float)
    Y = 0.5 + 2.0 * D + W[:, 1] - W[:, 2] + rng.standard_normal(n) * (1 + D)
    return Dataset(Y=Y, D=D, W=W)


@pytest.fixture
def small_spec():
    return ScenarioSpec(
        name="small",
        n=200,
        error0=ErrorProcessSpec(kind="ar1", rho=0.5),
        treatment=TreatmentSpec(dist="bernoulli", p=0.5),
        effect=EffectSpec(tau=1.0),
        controls=(ErrorProcessSpec(kind="iid"),),
        gamma_true=(1.0, 0.5),
        methods=("Classic", "HC0", "HacNW"),
    )
