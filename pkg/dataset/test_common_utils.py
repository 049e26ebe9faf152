import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dataset.common_utils import JobConfig, load_config_file, read_csv, read_frame
from services.errors import ConfigError, DataError
from services.model_service import partition_clusters


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_three_rows_without_controls(tmp_path):
    path = _write(tmp_path, "y,x\n1,0\n2,1\n4,2\n")
    data = read_csv(path, JobConfig(input=path, y="y", x="x"))
    assert (data.n, data.d, data.K) == (3, 1, 0)
    assert_array_equal(data.cluster_id, [0, 1, 2])
    assert data.x_names == ("x",)


def test_cluster_ids_are_text(tmp_path):
    path = _write(tmp_path, "y,x,w,firm\n1,0,1,007\n2,1,0, 7\n4,2,1,007\n")
    data = read_csv(path, JobConfig(input=path, y="y", x="x", w="w", cluster="firm"))
    assert_array_equal(data.cluster_id, ["007", "7", "007"])
    assert data.w_names == ("w",)


def test_non_numeric_cell_names_row_and_column(tmp_path):
    rows = [f"{i},{i * 0.5}" for i in range(10)]
    rows[6] = "6,abc"
    path = _write(tmp_path, "y,x\n" + "\n".join(rows) + "\n")
    with pytest.raises(DataError, match="row 7") as err:
        read_csv(path, JobConfig(input=path, y="y", x="x"))
    assert "'x'" in str(err.value)
    assert "abc" in str(err.value)


def test_missing_column(tmp_path):
    path = _write(tmp_path, "y,x\n1,2\n")
    with pytest.raises(DataError, match="z"):
        read_csv(path, JobConfig(input=path, y="y", x="x", w="z"))


def test_empty_and_header_only_files(tmp_path):
    with pytest.raises(DataError, match="empty"):
        read_frame(_write(tmp_path, "", "empty.csv"))
    with pytest.raises(DataError, match="no data rows"):
        read_frame(_write(tmp_path, "y,x\n", "header.csv"))
    with pytest.raises(DataError, match="not found"):
        read_frame(str(tmp_path / "missing.csv"))


def test_config_file_formats(tmp_path):
    as_json = _write(tmp_path, json.dumps({"y": "lviol", "x": ["efaviol"], "alpha": 0.1}), "job.json")
    assert load_config_file(as_json) == {"y": "lviol", "x": ["efaviol"], "alpha": 0.1}

    lines = "# job\ny = lviol\nx = efaviol, other\nalpha = 0.1\ncollapsed = true\nma_lag = 1\n"
    values = load_config_file(_write(tmp_path, lines, "job.cfg"))
    assert values == {"y": "lviol", "x": "efaviol, other", "alpha": 0.1, "collapsed": True, "ma_lag": 1}

    with pytest.raises(ConfigError):
        load_config_file(_write(tmp_path, "just words\n", "bad.cfg"))
    with pytest.raises(ConfigError):
        load_config_file(_write(tmp_path, "[1, 2]", "list.json"))


def test_flags_override_file_values():
    config = JobConfig.merged(
        {"y": "a", "x": "b,c", "alpha": 0.1, "solver-mode": "dense"},
        {"alpha": 0.01, "y": None},
    )
    assert config.y == "a"
    assert config.x == ("b", "c")
    assert config.alpha == 0.01
    assert config.solver_mode == "dense"


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown configuration key"):
        JobConfig.merged({"colour": "red"}, {})
    with pytest.raises(ConfigError):
        JobConfig(command="plot")
    with pytest.raises(ConfigError):
        JobConfig(format="xml")
    with pytest.raises(ConfigError, match="more than one role"):
        JobConfig(input="f.csv", y="y", x="a", w="a").require_columns()
    with pytest.raises(ConfigError):
        JobConfig(input="f.csv", y="y").require_columns()
    assert np.isclose(JobConfig().alpha, 0.05)


def test_state_year_panel_shape(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["state,year,y,x"]
    for s in range(50):
        for year in range(1985, 1998):
            lines.append(f"S{s:02d},{year},{rng.standard_normal()},{rng.standard_normal()}")
    path = _write(tmp_path, "\n".join(lines) + "\n")
    data = read_csv(path, JobConfig(input=path, y="y", x="x", cluster="state"))
    assert data.n == 650
    assert partition_clusters(data.cluster_id).G == 50


def test_blank_cluster_label_is_rejected(tmp_path):
    path = _write(tmp_path, "y,x,firm\n1,0,a\n2,1,  \n4,2,a\n5,3,b\n")
    with pytest.raises(DataError, match="row 2") as err:
        read_csv(path, JobConfig(input=path, y="y", x="x", cluster="firm"))
    assert "'firm'" in str(err.value)


def test_blank_absorb_label_is_rejected(tmp_path):
    path = _write(tmp_path, "y,x,state\n1,0,AL\n2,1,AK\n4,2,AL\n5,3,\n")
    with pytest.raises(DataError, match="row 4") as err:
        read_csv(path, JobConfig(input=path, y="y", x="x", absorb="state"))
    assert "'state'" in str(err.value)
