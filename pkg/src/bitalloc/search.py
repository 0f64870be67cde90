"""
Bit-width search for bitalloc.

Builds the layers x bit-widths quantization error table once, then picks for
every layer the smallest bit-width whose error stays within the int8 error
scaled by the quantization error multiplier (QEM):

    optBit = min { b in B : QE(l, b) <= QE(l, 8) * QEM }

Selection for many QEMs reuses one table, so a sweep costs O(L*B) quantizations
plus O(L*B*M) comparisons.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from .model_io import ModelWeights, check_coverage
from .quant import (
    BASELINE_BITS,
    DEFAULT_BITS,
    BitWidth,
    QuantError,
    dequantize,
    quantization_mse,
    quantize,
)


logger = logging.getLogger("bitalloc.search")


class SearchError(Exception):
    """Base exception for bit-width search operations."""
    pass


def normalize_bits(bits: Iterable[Union[int, BitWidth]], require_baseline: bool = True) -> Tuple[int, ...]:
    """Validate a bit-width list, keeping its order.

    Raises:
        SearchError: If empty, duplicated, unsupported, or lacking 8 when required
    """
    try:
        normalized = tuple(BitWidth.coerce(b).bits for b in bits)
    except QuantError as e:
        raise SearchError(str(e))
    if not normalized:
        raise SearchError("At least one bit-width is required")
    if len(set(normalized)) != len(normalized):
        raise SearchError(f"Duplicate bit-widths in {list(normalized)}")
    if require_baseline and BASELINE_BITS not in normalized:
        raise SearchError("baseline bit-width 8 required")
    return normalized


def _check_qem(qem: float) -> float:
    try:
        value = float(qem)
    except (TypeError, ValueError):
        raise SearchError(f"Invalid QEM: {qem!r}")
    if not np.isfinite(value) or value <= 0:
        raise SearchError(f"QEM must be positive and finite, got {qem}")
    return value


def format_bit_set(bit_set: Iterable[int]) -> str:
    """Render a bit set the way result tables show it, e.g. ``"6, 7"``."""
    return ", ".join(str(b) for b in sorted(bit_set))


@dataclass(frozen=True, eq=False)
class ErrorTable:
    """Quantization error of every layer at every candidate bit-width."""
    layer_names: Tuple[str, ...]
    bit_widths: Tuple[int, ...]
    qe: np.ndarray

    def __post_init__(self) -> None:
        names = tuple(self.layer_names)
        bits = normalize_bits(self.bit_widths)
        qe = np.array(self.qe, dtype=np.float32)
        if qe.shape != (len(names), len(bits)):
            raise SearchError(
                f"Error table shape {qe.shape} does not match "
                f"{len(names)} layers x {len(bits)} bit-widths"
            )
        if not np.all(np.isfinite(qe)) or np.any(qe < 0):
            raise SearchError("Error table entries must be finite and non-negative")
        qe.setflags(write=False)
        object.__setattr__(self, "layer_names", names)
        object.__setattr__(self, "bit_widths", bits)
        object.__setattr__(self, "qe", qe)

    @property
    def num_layers(self) -> int:
        return len(self.layer_names)

    @property
    def baseline_index(self) -> int:
        return self.bit_widths.index(BASELINE_BITS)

    @property
    def baseline_qe(self) -> np.ndarray:
        """The int8 column."""
        return self.qe[:, self.baseline_index]

    def lookup(self, layer: str, bits: int) -> float:
        row = self.layer_names.index(layer)
        return float(self.qe[row, self.bit_widths.index(int(bits))])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layers": list(self.layer_names),
            "bits": list(self.bit_widths),
            "qe": [[float(v) for v in row] for row in self.qe],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ErrorTable":
        try:
            return cls(tuple(data["layers"]), tuple(data["bits"]), np.asarray(data["qe"]))
        except KeyError as e:
            raise SearchError(f"Error table document lacks {e}")


@dataclass(frozen=True)
class BitAllocation:
    """Chosen bit-width per layer for one QEM.

    fallback_layers lists layers where no bit-width met the threshold
    (only possible for QEM < 1); they keep 8 bits.
    """
    per_layer_bits: Dict[str, int]
    qem: float
    fallback_layers: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        _check_qem(self.qem)
        if not self.per_layer_bits:
            raise SearchError("Allocation must cover at least one layer")
        try:
            bits = {name: BitWidth.coerce(b).bits for name, b in self.per_layer_bits.items()}
        except QuantError as e:
            raise SearchError(str(e))
        unknown = set(self.fallback_layers) - set(bits)
        if unknown:
            raise SearchError(f"Fallback layers not in allocation: {sorted(unknown)}")
        object.__setattr__(self, "per_layer_bits", bits)
        object.__setattr__(self, "qem", float(self.qem))
        object.__setattr__(self, "fallback_layers", tuple(self.fallback_layers))

    @property
    def bit_set(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.per_layer_bits.values())))

    def bits_for(self, layer_names: Sequence[str]) -> List[int]:
        return [self.per_layer_bits[name] for name in layer_names]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "qem": self.qem,
            "bits": dict(self.per_layer_bits),
            "bit_set": list(self.bit_set),
            "fallback_layers": list(self.fallback_layers),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BitAllocation":
        try:
            return cls(
                per_layer_bits=dict(data["bits"]),
                qem=data["qem"],
                fallback_layers=tuple(data.get("fallback_layers", ())),
            )
        except KeyError as e:
            raise SearchError(f"Allocation document lacks {e}")


def _layer_errors(weights: np.ndarray, bits: Sequence[int]) -> List[np.float32]:
    return [quantization_mse(weights, dequantize(quantize(weights, b))) for b in bits]


def build_error_table(
    model: ModelWeights,
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
    progress: bool = False,
) -> ErrorTable:
    """Quantize every layer at every bit-width and record the MSE.

    Layers may be evaluated in parallel threads; each worker fills its own row,
    so the table does not depend on n_jobs.

    Raises:
        SearchError: If bits lack the 8-bit baseline or quantization fails
    """
    bits = normalize_bits(bits)
    layers = model.layers
    iterator = tqdm(layers, desc="Quantization errors", unit="layer", disable=not progress)
    try:
        rows = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_layer_errors)(layer.weights, bits) for layer in iterator
        )
    except QuantError as e:
        logger.error(f"Failed to build error table for {model.model_name}: {e}")
        raise SearchError(f"Error table construction failed: {e}")

    table = ErrorTable(tuple(model.layer_names), bits, np.asarray(rows, dtype=np.float32))
    zero_baseline = int(np.count_nonzero(table.baseline_qe == 0))
    if zero_baseline:
        logger.warning(f"{zero_baseline} layer(s) have zero int8 error; "
                       f"only exact bit-widths qualify for them")
    logger.info(f"Built error table: {table.num_layers} layers x {len(bits)} bit-widths")
    return table


def select_bitwidths(table: ErrorTable, qem: float) -> BitAllocation:
    """Smallest bit-width per layer with QE <= int8 QE * qem.

    Layers where nothing qualifies (qem < 1) fall back to 8 bits and are flagged.

    Raises:
        SearchError: If qem <= 0
    """
    qem = _check_qem(qem)
    order = np.argsort(np.asarray(table.bit_widths))
    ascending_bits = np.asarray(table.bit_widths)[order]

    threshold = table.baseline_qe.astype(np.float64) * qem
    feasible = table.qe.astype(np.float64)[:, order] <= threshold[:, None]
    any_feasible = feasible.any(axis=1)
    chosen = np.where(any_feasible, ascending_bits[feasible.argmax(axis=1)], BASELINE_BITS)

    fallback = tuple(name for name, ok in zip(table.layer_names, any_feasible) if not ok)
    if fallback:
        logger.warning(f"QEM {qem}: {len(fallback)} layer(s) fall back to 8 bits")

    allocation = BitAllocation(
        per_layer_bits={name: int(b) for name, b in zip(table.layer_names, chosen)},
        qem=qem,
        fallback_layers=fallback,
    )
    logger.debug(f"QEM {qem}: bit set {format_bit_set(allocation.bit_set)}")
    return allocation


def sweep_qems(table: ErrorTable, qems: Sequence[float]) -> List[BitAllocation]:
    """One allocation per QEM from the same table.

    Raises:
        SearchError: If qems is empty or any qem <= 0
    """
    qems = list(qems)
    if not qems:
        raise SearchError("At least one QEM is required")
    return [select_bitwidths(table, qem) for qem in qems]


def oracle_select(table: ErrorTable, qem: float) -> BitAllocation:
    """Reference selection by exhaustive enumeration.

    Visits every (layer, bit-width) cell, collects all feasible bit-widths and
    takes their minimum. Kept independent of select_bitwidths for verification.
    """
    qem = float(qem)
    if not qem > 0 or qem == float("inf"):
        raise SearchError(f"QEM must be positive and finite, got {qem}")

    per_layer = {}
    fallback = []
    for row, name in enumerate(table.layer_names):
        baseline = None
        for col, bits in enumerate(table.bit_widths):
            if bits == BASELINE_BITS:
                baseline = float(table.qe[row, col])
        feasible = []
        for col, bits in enumerate(table.bit_widths):
            if float(table.qe[row, col]) <= baseline * qem:
                feasible.append(bits)
        if feasible:
            per_layer[name] = min(feasible)
        else:
            per_layer[name] = BASELINE_BITS
            fallback.append(name)
    return BitAllocation(per_layer_bits=per_layer, qem=qem, fallback_layers=tuple(fallback))


def model_qmse(
    model: ModelWeights,
    allocation: Union[BitAllocation, Mapping[str, int]],
    table: Optional[ErrorTable] = None,
) -> float:
    """Mean over layers of the QE at each layer's allocated bit-width.

    Reads the values from table when one is given.
    """
    bits_by_layer = getattr(allocation, "per_layer_bits", allocation)
    check_coverage(model, bits_by_layer)
    errors = []
    for layer in model.layers:
        bits = int(bits_by_layer[layer.name])
        if table is not None and bits in table.bit_widths:
            errors.append(table.lookup(layer.name, bits))
        else:
            errors.append(float(quantization_mse(layer.weights, dequantize(quantize(layer.weights, bits)))))
    return float(np.mean(errors))


def run_search(
    model: ModelWeights,
    qems: Sequence[float],
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
    progress: bool = False,
) -> Tuple[ErrorTable, List[BitAllocation]]:
    """Build the table once and select bit-widths for every QEM."""
    table = build_error_table(model, bits, n_jobs=n_jobs, progress=progress)
    return table, sweep_qems(table, qems)
