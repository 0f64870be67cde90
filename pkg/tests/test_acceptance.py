"""
Large-corpus checks of the quantizer, the search and the experiment harnesses.
Run with ``pytest -m slow``.
"""

import time

import numpy as np
import pytest

from conftest import random_error_table
from src.bitalloc import search
from src.bitalloc.cli import EXIT_OK, main
from src.bitalloc.inference import NetworkSpec, correlation_from_curve, qe_accuracy_curve, random_batch
from src.bitalloc.ini import RunConfig
from src.bitalloc.bitalloc import measure_runtime, synthetic_spec
from src.bitalloc.model_io import (
    LayerRecord,
    LayerType,
    ModelWeights,
    SyntheticSpec,
    generate_synthetic_model,
    load_quantized,
    mlp_spec,
    quantize_model,
    save_quantized,
)
from src.bitalloc.quant import DEFAULT_BITS, dequantize, quantize, round_half_away_from_zero
from src.bitalloc.search import build_error_table, oracle_select, select_bitwidths, sweep_qems
from src.bitalloc.sensitivity import sweep_configurations


pytestmark = pytest.mark.slow


def _ulp(*tensors):
    magnitude = np.max(np.abs(np.stack(tensors)), axis=0).astype(np.float32)
    return np.spacing(magnitude).astype(np.float64)


def test_roundtrip_bounds_on_random_corpus():
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(10_000):
        t = rng.uniform(-10, 10, size=int(rng.integers(1, 4097))).astype(np.float32)
        for bits in DEFAULT_BITS:
            q = quantize(t, bits)
            restored = dequantize(q)
            scale = np.float32(q.params.scale)
            error = np.abs(t.astype(np.float64) - restored.astype(np.float64))
            ulp = 4 * _ulp(t, restored)
            violations += int(np.sum(error > 1.5 * np.float64(scale) + ulp))

            raw = round_half_away_from_zero(t / scale) + q.params.zero_point
            inside = (raw >= q.bit_width.qmin) & (raw <= q.bit_width.qmax)
            violations += int(np.sum(error[inside] > 0.5 * np.float64(scale) + ulp[inside]))
    assert violations == 0


def _check_feasible_and_minimal(table, allocation):
    qem = np.float64(allocation.qem)
    for row, name in enumerate(table.layer_names):
        baseline = np.float64(table.baseline_qe[row])
        chosen = allocation.per_layer_bits[name]
        feasible = [b for col, b in enumerate(table.bit_widths)
                    if np.float64(table.qe[row, col]) <= baseline * qem]
        if name in allocation.fallback_layers:
            assert not feasible and chosen == 8
        else:
            assert chosen == min(feasible)


def test_search_matches_oracle_on_random_tables():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        table = random_error_table(rng, int(rng.integers(1, 201)))
        qem = float(rng.uniform(0.5, 10))
        allocation = select_bitwidths(table, qem)
        assert allocation == oracle_select(table, qem)
        _check_feasible_and_minimal(table, allocation)


def test_bits_never_increase_with_qem():
    rng = np.random.default_rng(7)
    for _ in range(200):
        table = random_error_table(rng, int(rng.integers(1, 101)))
        qems = np.sort(rng.uniform(0.5, 20, size=8))
        allocations = sweep_qems(table, qems)
        for lower, higher in zip(allocations, allocations[1:]):
            for name in table.layer_names:
                assert higher.per_layer_bits[name] <= lower.per_layer_bits[name]


def _timed_search(model, qems):
    best = float("inf")
    for _ in range(3):
        start = time.perf_counter()
        sweep_qems(build_error_table(model, DEFAULT_BITS), qems)
        best = min(best, time.perf_counter() - start)
    return best


def test_ten_qems_cost_at_most_ten_single_searches():
    model = generate_synthetic_model(SyntheticSpec.uniform(100, (128, 128), seed=3))
    qems = [float(q) for q in range(1, 11)]

    def best_search_seconds(qem_list):
        return min(measure_runtime(model, qem_list).search_seconds for _ in range(3))

    single = best_search_seconds(qems[:1])
    ten = best_search_seconds(qems)
    assert ten <= 10 * single * 1.2


def test_search_time_is_linear_in_layers(monkeypatch):
    calls = []
    original = search.quantize

    def counting(t, b):
        calls.append(b)
        return original(t, b)

    monkeypatch.setattr(search, "quantize", counting)
    qems = [1.0, 2.0, 5.0, 10.0]
    timings = []
    for layers in (50, 100, 200, 400):
        model = generate_synthetic_model(SyntheticSpec.uniform(layers, (128, 128), seed=layers))
        calls.clear()
        sweep_qems(build_error_table(model, DEFAULT_BITS), qems)
        assert len(calls) == layers * len(DEFAULT_BITS)
        timings.append(_timed_search(model, qems))

    for smaller, larger in zip(timings, timings[1:]):
        assert 1.5 <= larger / smaller <= 3.0


@pytest.mark.parametrize("seed", range(5))
def test_quantization_error_tracks_agreement(seed):
    model = generate_synthetic_model(mlp_spec(depth=3 + seed % 4, width=64, in_features=32, classes=10, seed=seed))
    spec = NetworkSpec.from_model(model)
    curve = qe_accuracy_curve(spec, model, random_batch(spec, 512, seed=seed), DEFAULT_BITS)
    assert correlation_from_curve(curve) < 0
    top1 = {point.bits: point.report.top1_agreement for point in curve}
    assert top1[8] >= top1[2]


def test_twelve_layer_ablation(tmp_path):
    argv = ["ablate", "--layers", "12", "--width", "8", "--eval", "--batch-size", "64"]
    for run_dir in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / run_dir)]) == EXIT_OK
    for path in (tmp_path / "a").iterdir():
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()

    sensitive = (tmp_path / "a" / "ablate_resnet_like_sensitive.csv").read_text().splitlines()
    assert len(sensitive) == 1 + len(DEFAULT_BITS)

    model = generate_synthetic_model(synthetic_spec(RunConfig(command="ablate", synthetic_layers=12, synthetic_width=8)))
    assert len(model) == 12
    uniform = quantize_model(model, {name: 8 for name in model.layer_names})
    for layer_type, _, per_layer in sweep_configurations(model):
        quantized = quantize_model(model, per_layer)
        for layer, q, base in zip(model.layers, quantized.layers, uniform.layers):
            if layer.layer_type != layer_type:
                np.testing.assert_array_equal(q.quantized.codes, base.quantized.codes)


def test_quantized_persistence_on_random_models(tmp_path):
    rng = np.random.default_rng(5)
    types = list(LayerType)
    for index in range(100):
        layers = []
        for position in range(int(rng.integers(1, 6))):
            shape = tuple(int(s) for s in rng.integers(1, 9, size=int(rng.integers(1, 5))))
            weights = (rng.standard_normal(shape) * rng.uniform(0.01, 5)).astype(np.float32)
            layers.append(LayerRecord(f"layer{position}", position, types[int(rng.integers(len(types)))], weights))
        model = ModelWeights.from_layers(f"model{index}", layers)
        bits = {name: int(rng.choice(DEFAULT_BITS)) for name in model.layer_names}

        path = save_quantized(model, bits, tmp_path / f"m{index}" / "manifest.json")
        original = quantize_model(model, bits)
        loaded = load_quantized(path)

        assert loaded.model_name == model.model_name
        assert loaded.bits_by_layer == bits
        for a, b in zip(original.layers, loaded.layers):
            assert (a.name, a.position, a.layer_type) == (b.name, b.position, b.layer_type)
            assert a.quantized.params == b.quantized.params
            assert a.quantized.codes.shape == b.quantized.codes.shape
            np.testing.assert_array_equal(a.quantized.codes, b.quantized.codes)
