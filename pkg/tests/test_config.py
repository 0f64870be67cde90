import numpy as np
import pandas as pd
import pytest

from src.bitalloc.ini import Ini, IniError, RunConfig, load_run_config
from src.bitalloc.paths import Paths, PathsError, qem_label, safe_name
from src.bitalloc.quant import DEFAULT_BITS
from src.bitalloc.tabular import SUMMARY_SCHEMA, Tabular, TabularError, read_table, records_equal


@pytest.fixture
def ini_file(tmp_path):
    path = tmp_path / "conf" / "setup.ini"
    path.parent.mkdir()
    path.write_text(
        "[Paths]\nout_dir = out\n\n"
        "[Search]\nbits = 8, 6, 4\nqems = 3\nnum_jobs = 2\n\n"
        "[Output]\nformat = json\n\n"
        "[Synthetic]\nstd = he\n"
    )
    return path


def test_defaults():
    config = load_run_config({"command": "search"}, environ={})
    assert config.bits == DEFAULT_BITS
    assert config.qems == (1.0,)
    assert config.output_format == "csv"
    assert config.synthetic_std is None


def test_ini_values_apply(ini_file):
    config = load_run_config({"command": "search", "qems": None}, ini_file, environ={})
    assert config.bits == (8, 6, 4)
    assert config.qems == (3.0,)
    assert config.num_jobs == 2
    assert config.output_format == "json"
    assert config.out_dir == ini_file.parent.resolve() / "out"


def test_precedence(ini_file):
    environ = {"BITALLOC_NUM_JOBS": "4"}
    assert load_run_config({"command": "search"}, ini_file, environ).num_jobs == 4
    config = load_run_config({"command": "search", "num_jobs": 1, "qems": [5]}, ini_file, environ)
    assert config.num_jobs == 1
    assert config.qems == (5.0,)


def test_ini_path_from_environment(ini_file):
    config = load_run_config({"command": "search"}, environ={"BITALLOC_CONFIG": str(ini_file)})
    assert config.output_format == "json"


def test_bad_ini_value(tmp_path):
    path = tmp_path / "setup.ini"
    path.write_text("[Search]\nbits = a, b\n")
    with pytest.raises(IniError, match="Parameter reading failed"):
        Ini(path)


def test_missing_ini_file(tmp_path):
    with pytest.raises(IniError, match="not found"):
        Ini(tmp_path / "missing.ini")


def test_partial_ini_sets_only_what_it_names(tmp_path):
    path = tmp_path / "setup.ini"
    path.write_text("[Inference]\ntopk = 3\n")
    ini = Ini(path)
    assert ini.run_config_values() == {"topk": 3}
    assert ini.get_section("Search") == {}
    with pytest.raises(IniError):
        ini.get_section("Nope")


def test_bad_environment_jobs():
    with pytest.raises(IniError, match="BITALLOC_NUM_JOBS"):
        load_run_config({"command": "search"}, environ={"BITALLOC_NUM_JOBS": "many"})


def test_unknown_keys_and_missing_command():
    with pytest.raises(IniError, match="Unknown configuration keys"):
        load_run_config({"command": "search", "colour": "red"}, environ={})
    with pytest.raises(IniError, match="No command"):
        load_run_config({}, environ={})


@pytest.mark.parametrize(
    "kwargs",
    [
        {"command": "nope"},
        {"command": "search", "qems": []},
        {"command": "search", "qems": [float("inf")]},
        {"command": "search", "bits": [8, 8]},
        {"command": "correlate", "bits": [8, 4]},
        {"command": "search", "output_format": "xml"},
        {"command": "search", "synthetic_arch": "vgg"},
        {"command": "search", "synthetic_std": -1.0},
        {"command": "search", "topk": 0},
        {"command": "search", "synthetic_layers": 1},
        {"command": "search", "seed": -1},
    ],
)
def test_run_config_validation(kwargs):
    with pytest.raises(IniError):
        RunConfig(**kwargs)


def test_qems_deduplicated_in_order(caplog):
    config = RunConfig(command="sweep", qems=[2, 1, 2.0])
    assert config.qems == (2.0, 1.0)
    assert "Duplicate QEM 2 ignored" in caplog.text


def test_paths(tmp_path):
    paths = Paths(tmp_path, "results")
    assert paths.get_out_dir() == tmp_path.resolve() / "results"
    assert paths.artifact("ablate", "resnet like", "csv", "rqe").name == "ablate_resnet-like_rqe.csv"
    assert paths.basename("search", "m", qem_label(0.5)) == "search_m_qem0.5"
    assert not paths.get_out_dir().exists()
    assert paths.ensure_out_dir().is_dir()


def test_paths_rejects_file_as_out_dir(tmp_path):
    (tmp_path / "taken").write_text("")
    with pytest.raises(PathsError):
        Paths(tmp_path, "taken")


def test_safe_name():
    assert safe_name("block0.conv_1x1") == "block0.conv_1x1"
    with pytest.raises(PathsError):
        safe_name("///")


def _summary(**extra):
    row = {"architecture": "m", "qem": 2.0, "layers_bit_widths": "4, 8",
           "model_qmse": 1e-5, "fallback_layers": 0}
    row.update(extra)
    return row


def test_tabular_orders_columns_by_schema(tmp_path):
    tabular = Tabular(tmp_path)
    frame = tabular.structure_data([dict(reversed(list(_summary().items())))], SUMMARY_SCHEMA)
    assert list(frame.columns) == ["architecture", "qem", "layers_bit_widths", "model_qmse", "fallback_layers"]


@pytest.mark.parametrize(
    "records",
    [
        [],
        [_summary(qem=0.0)],
        [_summary(layers_bit_widths="4,8")],
        [_summary(model_qmse=-1.0)],
        [_summary(colour="red")],
        [_summary(top1_agreement=1.5)],
    ],
)
def test_tabular_rejects_invalid_records(tmp_path, records):
    with pytest.raises(TabularError):
        Tabular(tmp_path).structure_data(records, SUMMARY_SCHEMA)


def test_tabular_formats_agree(tmp_path):
    records = [_summary(), _summary(qem=3.0, model_qmse=1 / 3, top1_agreement=float("nan"))]
    csv = Tabular(tmp_path, "csv").write(records, SUMMARY_SCHEMA, "summary")
    js = Tabular(tmp_path, "json").write(records, SUMMARY_SCHEMA, "summary")
    assert records_equal(read_table(csv), read_table(js))


def test_tabular_rejects_format(tmp_path):
    with pytest.raises(TabularError):
        Tabular(tmp_path, "parquet")


def test_records_equal_detects_differences():
    left = pd.DataFrame({"a": [1.0, np.nan], "b": ["x", "y"]})
    assert records_equal(left, left.copy())
    assert not records_equal(left, left.assign(a=[1.0, 2.0]))
    assert not records_equal(left, left[["b", "a"]])
