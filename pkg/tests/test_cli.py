import json

import pandas as pd
import pytest

from src.bitalloc.cli import EXIT_DATA_ERROR, EXIT_OK, EXIT_USAGE_ERROR, main
from src.bitalloc.model_io import load_quantized
from src.bitalloc.tabular import read_table, records_equal


SMALL = ["--layers", "6", "--width", "8", "--batch-size", "32"]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("BITALLOC_CONFIG", raising=False)
    monkeypatch.delenv("BITALLOC_NUM_JOBS", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


def test_help_exits_cleanly(capsys):
    assert run("--help") == EXIT_OK
    assert "search" in capsys.readouterr().out


def test_unknown_flag_is_usage_error():
    assert run("search", "--frobnicate") == EXIT_USAGE_ERROR


def test_generate_then_search(tmp_path, capsys):
    assert run("generate", "--out", tmp_path, "--arch", "mlp", "--layers", 3, "--width", 8) == EXIT_OK
    manifest = tmp_path / "generate_mlp" / "manifest.json"
    assert manifest.is_file()
    assert (tmp_path / "generate_mlp" / "network.json").is_file()

    out = tmp_path / "search"
    assert run("search", "--model", manifest, "--out", out, "--qem", "1,2") == EXIT_OK
    summary = pd.read_csv(out / "search_mlp.csv", dtype={"layers_bit_widths": str})
    assert list(summary.columns) == ["architecture", "qem", "layers_bit_widths", "model_qmse", "fallback_layers"]
    assert summary["qem"].tolist() == [1.0, 2.0]
    assert summary["layers_bit_widths"].iloc[0] == "8"

    allocation = json.loads((out / "search_mlp_qem2.json").read_text())
    assert allocation["model_name"] == "mlp"
    assert set(allocation["bits"]) == {"dense0", "dense1", "dense2"}
    assert (out / "search_mlp_errors.json").is_file()
    assert len(pd.read_csv(out / "search_mlp_runtime.csv")) == 1
    assert str(out / "search_mlp.csv") in capsys.readouterr().out


def test_missing_model_is_data_error(tmp_path, capsys):
    code = run("search", "--model", tmp_path / "missing" / "manifest.json", "--out", tmp_path)
    assert code == EXIT_DATA_ERROR
    assert "manifest not found" in capsys.readouterr().err


def test_malformed_manifest_is_data_error(tmp_path, saved_model, capsys):
    manifest = json.loads(saved_model.read_text())
    manifest["layers"][0]["position"] = "first"
    saved_model.write_text(json.dumps(manifest))
    assert run("search", "--model", saved_model, "--out", tmp_path / "out") == EXIT_DATA_ERROR
    assert "[ERROR] Invalid position" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["search", "--qem", "0"],
        ["search", "--qem", "-1"],
        ["search", "--qem", "one"],
        ["search", "--bits", "7,6"],
        ["search", "--bits", "8,9"],
        ["correlate", "--bits", "8,7"],
        ["quantize", "--uniform", "1"],
        ["search", "--jobs", "0"],
    ],
)
def test_invalid_configuration_is_usage_error(tmp_path, argv, capsys):
    assert run(*argv, "--out", tmp_path) == EXIT_USAGE_ERROR
    assert "[ERROR]" in capsys.readouterr().err


def test_duplicate_qems_are_dropped(tmp_path, caplog):
    assert run("sweep", "--qem", "2,1,2", "--out", tmp_path, *SMALL) == EXIT_OK
    summary = pd.read_csv(tmp_path / "sweep_resnet_like.csv")
    assert summary["qem"].tolist() == [1.0, 2.0]
    assert "Duplicate QEM 2 ignored" in caplog.text


def test_huge_qem_drops_every_layer_to_two_bits(tmp_path):
    assert run("search", "--qem", "1e9", "--out", tmp_path, *SMALL) == EXIT_OK
    summary = pd.read_csv(tmp_path / "search_resnet_like.csv", dtype={"layers_bit_widths": str})
    assert summary["layers_bit_widths"].tolist() == ["2"]


def test_csv_and_json_reports_agree(tmp_path):
    for fmt in ("csv", "json"):
        assert run("sweep", "--qem", "1,3", "--eval", "--format", fmt, "--out", tmp_path / fmt, *SMALL) == EXIT_OK
    for stem in ("sweep_resnet_like", "sweep_resnet_like_layers"):
        csv = read_table(tmp_path / "csv" / f"{stem}.csv")
        js = read_table(tmp_path / "json" / f"{stem}.json")
        assert records_equal(csv, js)
    assert "top1_agreement" in read_table(tmp_path / "csv" / "sweep_resnet_like.csv").columns


def test_ablate_is_deterministic(tmp_path):
    for run_dir in ("a", "b"):
        assert run("ablate", "--out", tmp_path / run_dir, "--eval", *SMALL) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["ablate_resnet_like.csv", "ablate_resnet_like_rqe.csv", "ablate_resnet_like_sensitive.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablate_without_network_leaves_metrics_empty(tmp_path):
    assert run("ablate", "--out", tmp_path, "--bits", "8,4", *SMALL) == EXIT_OK
    types = pd.read_csv(tmp_path / "ablate_resnet_like.csv")
    assert types["top1_agreement"].isna().all()
    assert len(types) == types["layer_type"].nunique() * 2


def test_quantize_uniform(tmp_path):
    assert run("quantize", "--uniform", 4, "--out", tmp_path, *SMALL) == EXIT_OK
    quantized = load_quantized(tmp_path / "quantize_resnet_like" / "manifest.json")
    assert set(quantized.bits_by_layer.values()) == {4}
    report = pd.read_csv(tmp_path / "quantize_resnet_like.csv")
    assert report["compression_ratio"].iloc[0] == pytest.approx(8.0)


def test_report_from_search_allocation(tmp_path):
    assert run("search", "--qem", "5", "--out", tmp_path, *SMALL) == EXIT_OK
    allocation = tmp_path / "search_resnet_like_qem5.json"
    assert run("report", "--allocation", allocation, "--out", tmp_path, *SMALL) == EXIT_OK
    layers = pd.read_csv(tmp_path / "report_resnet_like.csv")
    assert len(layers) == 6
    assert layers["bits"].tolist() == list(json.loads(allocation.read_text())["bits"].values())
    assert (tmp_path / "report_resnet_like_size.csv").is_file()


def test_report_with_bad_allocation(tmp_path, capsys):
    allocation = tmp_path / "alloc.json"
    allocation.write_text(json.dumps({"bits": {"conv1": 9}}))
    assert run("report", "--allocation", allocation, "--out", tmp_path, *SMALL) == EXIT_DATA_ERROR
    assert "[ERROR]" in capsys.readouterr().err


def test_runtime_has_one_row_per_qem_count(tmp_path):
    assert run("runtime", "--out", tmp_path, *SMALL) == EXIT_OK
    runtime = pd.read_csv(tmp_path / "runtime_resnet_like.csv")
    assert runtime["qems"].tolist() == [1, 10]
    assert (runtime["search_seconds"] <= runtime["search_plus_quantization_seconds"]).all()


def test_correlate_writes_curve_and_rho(tmp_path):
    assert run("correlate", "--arch", "mlp", "--layers", 3, "--width", 16, "--out", tmp_path) == EXIT_OK
    curve = pd.read_csv(tmp_path / "correlate_mlp.csv")
    assert curve["bits"].tolist() == [8, 7, 6, 5, 4, 3, 2]
    rho = pd.read_csv(tmp_path / "correlate_mlp_rho.csv")
    assert rho["points"].iloc[0] == 7
    assert -1.0 <= rho["rank_correlation"].iloc[0] <= 1.0


def test_correlate_csv_and_json_agree(tmp_path):
    for fmt in ("csv", "json"):
        argv = ["correlate", "--arch", "mlp", "--layers", 3, "--width", 16, "--format", fmt]
        assert run(*argv, "--out", tmp_path / fmt) == EXIT_OK
    for stem in ("correlate_mlp", "correlate_mlp_rho"):
        csv = read_table(tmp_path / "csv" / f"{stem}.csv")
        js = read_table(tmp_path / "json" / f"{stem}.json")
        assert records_equal(csv, js)


def test_config_file_from_environment(tmp_path, monkeypatch):
    ini = tmp_path / "setup.ini"
    ini.write_text("[Paths]\nout_dir = from_ini\n\n[Output]\nformat = json\n")
    monkeypatch.setenv("BITALLOC_CONFIG", str(ini))
    assert run("search", "--qem", "2", *SMALL) == EXIT_OK
    assert (tmp_path / "from_ini" / "search_resnet_like.json").is_file()
