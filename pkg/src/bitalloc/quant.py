"""
Asymmetric affine quantization for bitalloc.
Computes scale and zero point per tensor, quantizes weights to signed integer
codes of 2 to 8 bits, dequantizes them back to f32 and measures the error.

All functions are pure: inputs are never mutated and no state is shared, so
they can be called from any number of threads.
"""

import logging
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence, Tuple, Union

import numpy as np


SUPPORTED_BITS: Tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
DEFAULT_BITS: Tuple[int, ...] = (8, 7, 6, 5, 4, 3, 2)
BASELINE_BITS = 8

# Substituted when max == min, the formula would otherwise give scale 0.
DEGENERATE_SCALE = 1.0
# Weights with |w| <= RQE_EPSILON do not take part in the relative error mean.
RQE_EPSILON = 1e-12

logger = logging.getLogger("bitalloc.quant")

ArrayLike = Union[np.ndarray, Sequence[float]]


class QuantError(Exception):
    """Base exception for quantization operations."""
    pass


@dataclass(frozen=True, order=True)
class BitWidth:
    """Signed integer bit-width with its code range [qmin, qmax]."""
    bits: int

    def __post_init__(self) -> None:
        if isinstance(self.bits, bool) or self.bits not in SUPPORTED_BITS:
            raise QuantError(
                f"Unsupported bit-width {self.bits!r}, expected one of {SUPPORTED_BITS}"
            )

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def steps(self) -> int:
        """Number of code steps between qmin and qmax."""
        return self.qmax - self.qmin

    @classmethod
    def coerce(cls, value: Union["BitWidth", int, Any]) -> "BitWidth":
        """Build a BitWidth from an int-like value, passing BitWidth through.

        Raises:
            QuantError: If the value is not an integral supported bit-width
        """
        if isinstance(value, cls):
            return value
        try:
            as_int = int(value)
        except (TypeError, ValueError):
            raise QuantError(f"Invalid bit-width: {value!r}")
        if as_int != value:
            raise QuantError(f"Bit-width must be integral, got {value!r}")
        return cls(as_int)

    def __int__(self) -> int:
        return self.bits

    def __str__(self) -> str:
        return f"int{self.bits}"


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine quantization parameters."""
    scale: float
    zero_point: int
    bit_width: BitWidth

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise QuantError(f"Scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes (int8 storage) and the parameters that produced them."""
    codes: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes)
        if codes.size == 0:
            raise QuantError("empty tensor")
        bw = self.params.bit_width
        if codes.min() < bw.qmin or codes.max() > bw.qmax:
            raise QuantError(
                f"Codes outside [{bw.qmin}, {bw.qmax}] for {bw}"
            )
        object.__setattr__(self, "codes", codes.astype(np.int8, copy=False))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.codes.shape)

    @property
    def bit_width(self) -> BitWidth:
        return self.params.bit_width


class RelativeError(NamedTuple):
    """Relative quantization error and how many near-zero weights were left out."""
    value: float
    excluded: int


class LinearSimulation(NamedTuple):
    """Elementwise ``inputs * weight + bias`` with f32 and with roundtripped weights."""
    f32_result: np.ndarray
    simulated_result: np.ndarray
    quantized: QuantizedTensor
    dequantized: np.ndarray


def as_tensor(values: ArrayLike, shape: Sequence[int] = None) -> np.ndarray:
    """Convert values to a validated f32 tensor.

    Args:
        values: Weight values, any array-like
        shape: Optional row-major shape to impose

    Returns:
        np.ndarray: float32 array

    Raises:
        QuantError: If the tensor is empty, non-finite or does not match shape
    """
    with np.errstate(over="ignore"):
        tensor = np.asarray(values, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape) or int(np.prod(shape)) != tensor.size:
            raise QuantError(f"Shape {shape} does not match {tensor.size} values")
        tensor = tensor.reshape(shape)
    if tensor.size == 0:
        raise QuantError("empty tensor")
    if not np.all(np.isfinite(tensor)):
        raise QuantError("non-finite input")
    return tensor


def round_half_away_from_zero(x: ArrayLike) -> np.ndarray:
    """Round to the nearest integer, ties away from zero.

    Evaluated in float64 so that ``|x| + 0.5`` is exact for every f32 input.
    """
    x64 = np.asarray(x, dtype=np.float64)
    return (np.sign(x64) * np.floor(np.abs(x64) + 0.5)).astype(np.int64)


def has_degenerate_range(t: ArrayLike) -> bool:
    """True when every value of the tensor is equal (max == min)."""
    tensor = as_tensor(t)
    return bool(tensor.max() == tensor.min())


def _affine_params(tensor: np.ndarray, bw: BitWidth) -> Tuple[np.float32, int]:
    min_r = tensor.min()
    max_r = tensor.max()
    if max_r == min_r:
        logger.debug("Degenerate range, substituting scale %s", DEGENERATE_SCALE)
        scale = np.float32(DEGENERATE_SCALE)
    else:
        with np.errstate(over="ignore", under="ignore"):
            scale = np.float32(max_r - min_r) / np.float32(bw.steps)
        if not np.isfinite(scale):
            raise QuantError(f"Value range of tensor overflows f32 at {bw}")
        if scale == 0:
            logger.warning("Scale underflows f32, substituting %s", DEGENERATE_SCALE)
            scale = np.float32(DEGENERATE_SCALE)

    # int() in the reference truncates toward zero, not floor
    zero_point = bw.qmin - int(np.trunc(min_r / scale))
    return scale, zero_point


def compute_scale(t: ArrayLike, b: Union[BitWidth, int]) -> np.float32:
    """Scale = (max - min) / (qmax - qmin), or 1.0 when max == min.

    Raises:
        QuantError: On empty or non-finite input
    """
    scale, _ = _affine_params(as_tensor(t), BitWidth.coerce(b))
    return scale


def compute_zero_point(t: ArrayLike, b: Union[BitWidth, int]) -> int:
    """Zero point = qmin - trunc(min / scale).

    Raises:
        QuantError: On empty or non-finite input
    """
    _, zero_point = _affine_params(as_tensor(t), BitWidth.coerce(b))
    return zero_point


def quantize(t: ArrayLike, b: Union[BitWidth, int]) -> QuantizedTensor:
    """Quantize a tensor to signed codes of the given bit-width.

    codes = clamp(round_half_away_from_zero(t / scale) + zero_point, qmin, qmax)

    Raises:
        QuantError: On empty or non-finite input
    """
    tensor = as_tensor(t)
    bw = BitWidth.coerce(b)
    scale, zero_point = _affine_params(tensor, bw)

    codes = round_half_away_from_zero(tensor / scale) + zero_point
    codes = np.clip(codes, bw.qmin, bw.qmax).astype(np.int8)

    params = QuantParams(scale=float(scale), zero_point=zero_point, bit_width=bw)
    return QuantizedTensor(codes=codes, params=params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """values = (codes - zero_point) * scale, as f32."""
    offsets = q.codes.astype(np.int64) - q.params.zero_point
    return offsets.astype(np.float32) * np.float32(q.params.scale)


def roundtrip(t: ArrayLike, b: Union[BitWidth, int]) -> np.ndarray:
    """Simulated quantization: dequantize(quantize(t, b))."""
    return dequantize(quantize(t, b))


def _paired(original: ArrayLike, dequantized: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(original, dtype=np.float32)
    b = np.asarray(dequantized, dtype=np.float32)
    if a.shape != b.shape:
        raise QuantError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise QuantError("empty tensor")
    return a.astype(np.float64), b.astype(np.float64)


def quantization_mse(original: ArrayLike, dequantized: ArrayLike) -> np.float32:
    """Mean squared error between f32 weights and their dequantized values.

    Accumulates in float64, returns float32.

    Raises:
        QuantError: On shape mismatch
    """
    a, b = _paired(original, dequantized)
    diff = a - b
    return np.float32(np.mean(diff * diff))


def relative_qe_stats(original: ArrayLike, dequantized: ArrayLike) -> RelativeError:
    """Mean of (w - w_hat) / w over weights with |w| > RQE_EPSILON.

    Returns 0 when every element is excluded.

    Raises:
        QuantError: On shape mismatch
    """
    a, b = _paired(original, dequantized)
    mask = np.abs(a) > RQE_EPSILON
    excluded = int(a.size - np.count_nonzero(mask))
    if excluded:
        logger.debug("Excluded %d near-zero weights from relative error", excluded)
    if not mask.any():
        return RelativeError(0.0, excluded)
    ratios = (a[mask] - b[mask]) / a[mask]
    return RelativeError(float(np.float32(np.mean(ratios))), excluded)


def relative_qe(original: ArrayLike, dequantized: ArrayLike) -> np.float32:
    """Signed relative quantization error, see relative_qe_stats."""
    return np.float32(relative_qe_stats(original, dequantized).value)


def simulate_linear(
    inputs: ArrayLike,
    weight: ArrayLike,
    bias: ArrayLike,
    b: Union[BitWidth, int],
) -> LinearSimulation:
    """Run ``inputs * weight + bias`` in f32, once with the original weight and
    once with its quantize/dequantize roundtrip.

    Raises:
        QuantError: On invalid tensors
    """
    x = as_tensor(inputs)
    w = as_tensor(weight)
    bias = as_tensor(bias)
    q = quantize(w, b)
    dq = dequantize(q)
    return LinearSimulation(
        f32_result=x * w + bias,
        simulated_result=x * dq + bias,
        quantized=q,
        dequantized=dq,
    )
