import dataclasses
import json
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules.data_io import read_dataset, write_dataset
from modules.dgp import assemble
from modules.errors import InvalidDataset
from modules.montecarlo import run_scenario
from modules.report import format_table, metadata, spec_hash, write_scenario_outputs


def test_tiny_fixture_layout(tiny):
    data, cluster_ids = tiny
    assert data.n == 6
    assert data.d_w == 1
    assert_allclose(data.W[:, 0], 1.0)
    assert_array_equal(data.V, data.D)
    assert_array_equal(np.bincount(cluster_ids), [3, 2, 1])


def test_constant_column_is_moved_first(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("y,d,w2,w1\n1,0,2,0.5\n2,1,2,1.5\n3,0,2,2.0\n4,1,2,0.1\n5,0,2,0.7\n")
    data, cluster_ids = read_dataset(str(path))
    assert data.d_w == 2
    assert_allclose(data.W[:, 0], 2.0)
    assert_allclose(data.W[:, 1], [0.5, 1.5, 2.0, 0.1, 0.7])
    assert cluster_ids is None


def test_unrecognized_columns_are_ignored(tmp_path, caplog):
    path = tmp_path / "data.csv"
    path.write_text("id,y,d,note\n101,1,0,a\n102,2,1,b\n103,3,0,c\n104,5,1,d\n")
    with caplog.at_level(logging.WARNING, logger="modules.data_io"):
        data, _ = read_dataset(str(path))
    assert data.d_w == 1
    assert_allclose(data.W[:, 0], 1.0)
    assert "id" in caplog.text and "note" in caplog.text


def test_numbered_controls_keep_numeric_order(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("y,d,w10,const,w2\n1,0,7,1,3\n2,1,8,1,1\n3,0,9,1,4\n4,1,6,1,1\n5,0,5,1,9\n")
    data, _ = read_dataset(str(path))
    assert_allclose(data.W, [[1, 3, 7], [1, 1, 8], [1, 4, 9], [1, 1, 6], [1, 9, 5]])


def test_group_column_doubles_as_cluster(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("y,d,group\n1,0,a\n2,0,a\n3,1,b\n4,1,b\n5,0,c\n6,0,c\n")
    data, cluster_ids = read_dataset(str(path))
    assert_array_equal(data.group_ids, [0, 0, 1, 1, 2, 2])
    assert_array_equal(cluster_ids, data.group_ids)


@pytest.mark.parametrize(
    "content",
    [
        "y,x\n1,2\n2,3\n3,4\n4,5\n",
        "y,d\n1,a\n2,b\n3,c\n4,d\n",
        "y,d\n1,0\n",
        "y,d,group\n1,0,a\n2,1,a\n3,0,b\n4,1,b\n5,0,c\n",
        "",
    ],
)
def test_invalid_csv(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(InvalidDataset):
        read_dataset(str(path))


def test_written_dataset_reads_back(small_spec, tmp_path):
    data, _ = assemble(small_spec, 42)
    path = tmp_path / "out" / "rep.csv"
    write_dataset(data, str(path), cluster_ids=np.arange(data.n) // 10)
    again, cluster_ids = read_dataset(str(path))
    assert_array_equal(again.Y, data.Y)
    assert_array_equal(again.W, data.W)
    assert_array_equal(cluster_ids, np.arange(data.n) // 10)


# ------------------------------------------------------------------ 输出


def test_format_table():
    table = format_table([{"method": "HC0", "se": 0.123456789}, {"method": "Classic", "se": 2.0}])
    lines = table.splitlines()
    assert lines[0].split() == ["method", "se"]
    assert lines[2].split() == ["HC0", "0.123457"]
    assert format_table([]) == ""


def test_spec_hash_is_stable(small_spec):
    assert spec_hash(small_spec) == spec_hash(dataclasses.replace(small_spec))
    assert spec_hash(small_spec) != spec_hash(dataclasses.replace(small_spec, n=201))
    meta = metadata(small_spec, 3)
    assert meta["base_seed"] == 3
    assert meta["spec_hash"] == spec_hash(small_spec)


def test_scenario_outputs(small_spec, tmp_path):
    result = run_scenario(small_spec, 8, base_seed=0, parallelism=2)
    paths = write_scenario_outputs(result, str(tmp_path), write_records=True)
    assert [p.rsplit("/", 1)[-1] for p in paths] == [
        "small_summary.csv",
        "small_replications.csv",
        "small_summary.json",
    ]
    document = json.loads((tmp_path / "small_summary.json").read_text(encoding="utf-8"))
    assert document["R_used"] == 8
    assert set(document["methods"]) == {"Classic", "HC0", "HacNW"}
    assert document["metadata"]["spec_hash"] == spec_hash(small_spec)
