import pytest

from src.bitalloc import bitalloc
from src.bitalloc.bitalloc import RuntimeReport, measure_runtime, synthetic_spec, timed_search
from src.bitalloc.ini import RunConfig
from src.bitalloc.model_io import QuantizedModel
from src.bitalloc.search import build_error_table, sweep_qems


def test_timed_search_matches_plain_search(resnet_model):
    table, allocations, report = timed_search(resnet_model, [1.0, 4.0])
    assert allocations == sweep_qems(build_error_table(resnet_model), [1.0, 4.0])
    assert table.layer_names == tuple(resnet_model.layer_names)
    assert report.layer_count == len(resnet_model)
    assert report.qem_count == 2
    assert 0 <= report.search_seconds <= report.search_plus_quantization_seconds


def test_quantization_phase_materializes_every_allocation(resnet_model, monkeypatch):
    calls = []
    original = QuantizedModel.dequantize

    def counting(self):
        calls.append(self.model_name)
        return original(self)

    monkeypatch.setattr(QuantizedModel, "dequantize", counting)
    measure_runtime(resnet_model, [1.0, 2.0, 3.0])
    assert len(calls) == 3


def test_search_workflow_reports_shared_timing(tmp_path, monkeypatch):
    seen = []
    original = bitalloc.timed_search

    def spy(*args, **kwargs):
        result = original(*args, **kwargs)
        seen.append(result[2])
        return result

    monkeypatch.setattr(bitalloc, "timed_search", spy)
    out_dir = tmp_path / "nested" / "out"
    config = RunConfig(command="search", qems=(1.0, 2.0), out_dir=out_dir, synthetic_layers=4, synthetic_width=4)
    bitalloc.BitAlloc(config).run()
    assert len(seen) == 1 and seen[0].qem_count == 2
    assert (out_dir / "search_resnet_like_runtime.csv").is_file()


def test_runtime_report_rejects_inverted_times():
    with pytest.raises(ValueError):
        RuntimeReport(search_seconds=2.0, search_plus_quantization_seconds=1.0, layer_count=1, qem_count=1)


def test_odd_resnet_layer_count_is_rounded_down(caplog):
    spec = synthetic_spec(RunConfig(command="generate", synthetic_layers=7))
    assert len(spec.layers) == 6
    assert "even layer count" in caplog.text


def test_std_override_applies_to_every_layer():
    spec = synthetic_spec(RunConfig(command="generate", synthetic_arch="mlp", synthetic_layers=3, synthetic_std=0.5))
    assert {layer.std for layer in spec.layers} == {0.5}
