"""
Quantization sensitivity ablations for bitalloc.

Two studies show that layers differ in how much quantization hurts them:
- by layer type: one type at a time is swept over bit-widths while every
  other layer stays at int8;
- by layer position: the relative quantization error (RQE) of every layer at
  every bit-width, and the position with the largest |RQE| per bit-width.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Mapping, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .model_io import LayerType, ModelWeights, quantize_model
from .quant import BASELINE_BITS, DEFAULT_BITS, BitWidth, quantization_mse, relative_qe_stats, roundtrip
from .search import SearchError, normalize_bits


logger = logging.getLogger("bitalloc.sensitivity")

EvalCallback = Callable[[ModelWeights], Any]


class SensitivityError(Exception):
    """Base exception for sensitivity ablations."""
    pass


@dataclass(frozen=True)
class TypeSweepResult:
    """Metrics of one (layer type, bit-width) sweep point."""
    layer_type: LayerType
    bit_width: int
    top1_agreement: float
    avg_loss: float
    model_qmse: float

    @property
    def metrics(self) -> Dict[str, float]:
        return {
            "top1_agreement": self.top1_agreement,
            "avg_loss": self.avg_loss,
            "model_qmse": self.model_qmse,
        }

    def to_record(self) -> Dict[str, Any]:
        return {"layer_type": self.layer_type.value, "bits": self.bit_width, **self.metrics}


@dataclass(frozen=True, eq=False)
class PositionRqeTable:
    """Signed RQE per (layer position, bit-width).

    most_sensitive maps each bit-width to the position with the largest |RQE|;
    ties go to the lowest position.
    """
    layer_names: Tuple[str, ...]
    bit_widths: Tuple[int, ...]
    rqe: np.ndarray
    excluded: np.ndarray

    @property
    def positions(self) -> List[int]:
        return list(range(len(self.layer_names)))

    @property
    def most_sensitive(self) -> Dict[int, int]:
        magnitude = np.abs(self.rqe)
        # argmax returns the first maximum, i.e. the lowest position
        return {bits: int(np.argmax(magnitude[:, col])) for col, bits in enumerate(self.bit_widths)}

    def to_records(self) -> List[Dict[str, Any]]:
        return [
            {
                "position": pos,
                "layer": self.layer_names[pos],
                "bits": bits,
                "rqe": float(self.rqe[pos, col]),
                "excluded": int(self.excluded[pos, col]),
            }
            for pos in self.positions
            for col, bits in enumerate(self.bit_widths)
        ]

    def summary_records(self) -> List[Dict[str, Any]]:
        return [
            {
                "bits": bits,
                "most_sensitive_position": pos,
                "layer": self.layer_names[pos],
            }
            for bits, pos in self.most_sensitive.items()
        ]


def _metric(report: Any, name: str) -> float:
    if report is None:
        return float("nan")
    value = report.get(name) if isinstance(report, Mapping) else getattr(report, name, None)
    return float("nan") if value is None else float(value)


def _bits(bits: Sequence[Union[int, BitWidth]]) -> Tuple[int, ...]:
    try:
        return normalize_bits(bits, require_baseline=False)
    except SearchError as e:
        raise SensitivityError(str(e))


def sweep_configurations(
    model: ModelWeights,
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
) -> Iterator[Tuple[LayerType, int, Dict[str, int]]]:
    """Yield (swept type, bit-width, per-layer bits) for every sweep point.

    Layers of the swept type get the swept bit-width, all others int8.
    """
    bits = _bits(bits)
    for layer_type in model.types_present():
        for b in bits:
            per_layer = {
                layer.name: (b if layer.layer_type == layer_type else BASELINE_BITS)
                for layer in model.layers
            }
            yield layer_type, b, per_layer


def _sweep_point(
    model: ModelWeights,
    layer_type: LayerType,
    bits: int,
    per_layer: Dict[str, int],
    evaluate: EvalCallback,
) -> TypeSweepResult:
    quantized = quantize_model(model, per_layer).dequantize()
    qmse = float(np.mean([
        quantization_mse(original.weights, q.weights)
        for original, q in zip(model.layers, quantized.layers)
    ]))
    report = evaluate(quantized) if evaluate is not None else None
    return TypeSweepResult(
        layer_type=layer_type,
        bit_width=bits,
        top1_agreement=_metric(report, "top1_agreement"),
        avg_loss=_metric(report, "avg_loss"),
        model_qmse=qmse,
    )


def layer_type_sweep(
    model: ModelWeights,
    evaluate: EvalCallback,
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
) -> List[TypeSweepResult]:
    """Sweep each present layer type over bits, keeping the rest at int8.

    Args:
        model: f32 weights, never mutated
        evaluate: Maps a dequantized model to an object or mapping exposing
            top1_agreement and avg_loss; None records NaN for both
        bits: Bit-widths to sweep
        n_jobs: Sweep points evaluated in parallel threads

    Raises:
        SensitivityError: If the model has no typed layers or bits are invalid
    """
    if not model.types_present():
        raise SensitivityError(f"Model {model.model_name} has no tagged layers")
    if evaluate is not None and not callable(evaluate):
        raise SensitivityError("evaluate must be callable")

    configurations = list(sweep_configurations(model, bits))
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_sweep_point)(model, layer_type, b, per_layer, evaluate)
        for layer_type, b, per_layer in configurations
    )
    logger.info(f"Layer type sweep: {len(model.types_present())} type(s) x "
                f"{len(_bits(bits))} bit-width(s)")
    return list(results)


def _layer_rqe(weights: np.ndarray, bits: Sequence[int]) -> List[Tuple[float, int]]:
    return [tuple(relative_qe_stats(weights, roundtrip(weights, b))) for b in bits]


def layer_position_rqe(
    model: ModelWeights,
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
) -> PositionRqeTable:
    """RQE of every layer at every bit-width and the most sensitive position per bit.

    Raises:
        SensitivityError: If bits are invalid
    """
    bits = _bits(bits)
    rows = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_layer_rqe)(layer.weights, bits) for layer in model.layers
    )
    cells = np.asarray(rows, dtype=np.float64)
    table = PositionRqeTable(
        layer_names=tuple(model.layer_names),
        bit_widths=bits,
        rqe=cells[:, :, 0].astype(np.float32),
        excluded=cells[:, :, 1].astype(np.int64),
    )
    total_excluded = int(table.excluded[:, 0].sum()) if table.excluded.size else 0
    if total_excluded:
        logger.warning(f"{total_excluded} near-zero weight(s) excluded from RQE")
    return table
