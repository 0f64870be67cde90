"""
Minimal f32 forward-pass engine for bitalloc.

Dense and 2-D convolution layers (odd square kernels, stride 1, same padding),
ReLU and global average pooling. It exists to check at desk scale that larger
quantization error goes with worse agreement between a quantized model and its
f32 original; the f32 model's own predictions serve as labels.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp
from scipy.stats import spearmanr

from .model_io import ModelWeights, quantize_model
from .quant import BitWidth, QuantError, quantization_mse
from .search import SearchError, normalize_bits
from .utils import UtilsError, read_json, write_json


logger = logging.getLogger("bitalloc.inference")

MIN_CURVE_POINTS = 3


class InferenceError(Exception):
    """Base exception for inference operations."""
    pass


class LayerKind(str, Enum):
    DENSE = "dense"
    CONV2D = "conv2d"


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


@dataclass(frozen=True)
class LayerDescriptor:
    """One network layer bound to a weight tensor by name.

    Dense weights are (out, in); conv2d weights are (out, in, k, k).
    """
    weight: str
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    activation: Activation = Activation.NONE

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise InferenceError(f"Layer {self.weight}: channel counts must be positive")
        if self.kind == LayerKind.CONV2D and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise InferenceError(f"Layer {self.weight}: kernel size must be odd")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == LayerKind.DENSE:
            return (self.out_channels, self.in_channels)
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weight": self.weight,
            "kind": self.kind.value,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "activation": self.activation.value,
        }


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus input shape: (features,) or (channels, height, width)."""
    input_shape: Tuple[int, ...]
    layers: Tuple[LayerDescriptor, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self._check_composition()

    def _check_composition(self) -> None:
        if len(self.input_shape) not in (1, 3) or any(s <= 0 for s in self.input_shape):
            raise InferenceError(f"Unsupported input shape {self.input_shape}")
        if not self.layers:
            raise InferenceError("Network must have at least one layer")

        spatial = len(self.input_shape) == 3
        width = self.input_shape[0]
        for layer in self.layers:
            if layer.kind == LayerKind.CONV2D and not spatial:
                raise InferenceError(f"Layer {layer.weight}: conv2d after flat features")
            # dense after conv reads globally pooled channels
            if layer.in_channels != width:
                raise InferenceError(
                    f"Layer {layer.weight}: expects {layer.in_channels} inputs, gets {width}"
                )
            if layer.kind == LayerKind.DENSE:
                spatial = False
            width = layer.out_channels
        if width != self.num_classes:
            raise InferenceError(
                f"Network ends with width {width}, expected {self.num_classes} classes"
            )

    def bind(self, weights: ModelWeights) -> None:
        """Check that every referenced weight exists with the expected shape.

        Raises:
            InferenceError: Naming the offending layer
        """
        names = set(weights.layer_names)
        for layer in self.layers:
            if layer.weight not in names:
                raise InferenceError(f"Layer {layer.weight}: weight not found in {weights.model_name}")
            shape = weights.layer(layer.weight).shape
            if shape != layer.weight_shape:
                raise InferenceError(
                    f"Layer {layer.weight}: weight shape {shape}, expected {layer.weight_shape}"
                )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NetworkSpec":
        try:
            return cls(
                input_shape=tuple(data["input_shape"]),
                layers=tuple(LayerDescriptor(**entry) for entry in data["layers"]),
                num_classes=int(data["num_classes"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InferenceError(f"Invalid network spec: {e}")

    @classmethod
    def from_model(
        cls,
        model: ModelWeights,
        input_hw: Tuple[int, int] = (8, 8),
    ) -> "NetworkSpec":
        """Chain every layer of a model in position order.

        4-D weights become conv2d, 2-D weights dense; ReLU everywhere but the
        last layer.
        """
        layers = []
        last = len(model.layers) - 1
        for layer in model.layers:
            activation = Activation.NONE if layer.position == last else Activation.RELU
            if len(layer.shape) == 4:
                out_ch, in_ch, kh, kw = layer.shape
                if kh != kw:
                    raise InferenceError(f"Layer {layer.name}: non-square kernel {kh}x{kw}")
                layers.append(LayerDescriptor(layer.name, LayerKind.CONV2D, in_ch, out_ch, kh, activation))
            elif len(layer.shape) == 2:
                out_f, in_f = layer.shape
                layers.append(LayerDescriptor(layer.name, LayerKind.DENSE, in_f, out_f, 1, activation))
            else:
                raise InferenceError(f"Layer {layer.name}: cannot chain shape {layer.shape}")
        first = layers[0]
        input_shape = (
            (first.in_channels,) + tuple(input_hw)
            if first.kind == LayerKind.CONV2D
            else (first.in_channels,)
        )
        return cls(input_shape=input_shape, layers=tuple(layers), num_classes=layers[-1].out_channels)


@dataclass(frozen=True)
class EvalReport:
    """Agreement of a quantized model with its f32 original on one batch."""
    top1_agreement: float
    topk_agreement: float
    avg_loss: float
    model_qmse: float
    k: int = 5


class CurvePoint(NamedTuple):
    bits: int
    report: EvalReport


def load_network_spec(path: Union[str, Path]) -> NetworkSpec:
    try:
        return NetworkSpec.from_dict(read_json(path))
    except (UtilsError, FileNotFoundError) as e:
        raise InferenceError(f"Network spec reading failed: {e}")


def save_network_spec(spec: NetworkSpec, path: Union[str, Path]) -> Path:
    try:
        return write_json(path, spec.to_dict())
    except UtilsError as e:
        raise InferenceError(f"Network spec writing failed: {e}")


def load_batch(path: Union[str, Path], spec: NetworkSpec) -> np.ndarray:
    """Read a raw little-endian f32 blob as a batch of spec.input_shape rows."""
    path = Path(path)
    if not path.is_file():
        raise InferenceError(f"Batch blob not found: {path}")
    values = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32)
    row = int(np.prod(spec.input_shape))
    if values.size == 0 or values.size % row:
        raise InferenceError(f"Batch blob of {values.size} values does not split into rows of {row}")
    return values.reshape((-1,) + spec.input_shape)


def random_batch(spec: NetworkSpec, size: int, seed: int = 0) -> np.ndarray:
    """Standard normal inputs of the network's input shape."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((size,) + spec.input_shape, dtype=np.float32)


def _conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    pad = w.shape[-1] // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, w.shape[-2:], axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)


def _global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=np.float32)


def forward(spec: NetworkSpec, weights: ModelWeights, batch: np.ndarray) -> np.ndarray:
    """Logits of a batch, all arithmetic in f32.

    Raises:
        InferenceError: On shape mismatch, naming the offending layer
    """
    spec.bind(weights)
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise InferenceError(f"Batch shape {x.shape} does not match input {spec.input_shape}")

    for layer in spec.layers:
        w = weights.layer(layer.weight).weights
        if layer.kind == LayerKind.CONV2D:
            x = _conv2d(x, w)
        else:
            if x.ndim == 4:
                x = _global_avg_pool(x)
            x = x @ w.T
        if layer.activation == Activation.RELU:
            x = np.maximum(x, np.float32(0))
    if x.ndim == 4:
        x = _global_avg_pool(x)
    return x.astype(np.float32, copy=False)


def _check_pair(f32_weights: ModelWeights, q_weights: ModelWeights) -> None:
    if f32_weights.layer_names != q_weights.layer_names:
        raise InferenceError("mismatched layer sets between f32 and quantized weights")
    for a, b in zip(f32_weights.layers, q_weights.layers):
        if a.shape != b.shape:
            raise InferenceError(f"mismatched layer sets: {a.name} has shapes {a.shape} vs {b.shape}")


def evaluate_agreement(
    spec: NetworkSpec,
    f32_weights: ModelWeights,
    q_weights: ModelWeights,
    batch: np.ndarray,
    k: int = 5,
) -> EvalReport:
    """Compare quantized predictions against the f32 model's argmax labels.

    Ties in argmax and top-k go to the lowest class index.

    Raises:
        InferenceError: If k < 1 or the weight sets differ
    """
    if int(k) < 1:
        raise InferenceError(f"k must be at least 1, got {k}")
    _check_pair(f32_weights, q_weights)

    reference = forward(spec, f32_weights, batch)
    logits = forward(spec, q_weights, batch)
    labels = np.argmax(reference, axis=1)

    ranking = np.argsort(-logits, axis=1, kind="stable")
    top1 = ranking[:, 0] == labels
    topk = np.any(ranking[:, : int(k)] == labels[:, None], axis=1)

    logits64 = logits.astype(np.float64)
    losses = logsumexp(logits64, axis=1) - logits64[np.arange(len(labels)), labels]

    qmse = np.mean([
        quantization_mse(a.weights, b.weights)
        for a, b in zip(f32_weights.layers, q_weights.layers)
    ])
    return EvalReport(
        top1_agreement=float(np.mean(top1)),
        topk_agreement=float(np.mean(topk)),
        avg_loss=float(np.mean(losses)),
        model_qmse=float(qmse),
        k=int(k),
    )


def qe_accuracy_curve(
    spec: NetworkSpec,
    f32_weights: ModelWeights,
    batch: np.ndarray,
    bits: Sequence[Union[int, BitWidth]],
    k: int = 5,
) -> List[CurvePoint]:
    """Evaluate the model uniformly quantized at each bit-width."""
    try:
        bits = normalize_bits(bits, require_baseline=False)
    except SearchError as e:
        raise InferenceError(str(e))
    points = []
    for b in bits:
        q_weights = quantize_model(f32_weights, {name: b for name in f32_weights.layer_names}).dequantize()
        report = evaluate_agreement(spec, f32_weights, q_weights, batch, k)
        logger.debug(f"int{b}: qmse={report.model_qmse:.3e} top1={report.top1_agreement:.4f}")
        points.append(CurvePoint(b, report))
    return points


def correlation_from_curve(points: Sequence[CurvePoint]) -> float:
    """Spearman rank correlation between model QMSE and top-1 agreement.

    Defined as 0 when either series is constant.

    Raises:
        InferenceError: With fewer than 3 points
    """
    if len(points) < MIN_CURVE_POINTS:
        raise InferenceError(f"Correlation needs at least {MIN_CURVE_POINTS} bit-widths, got {len(points)}")
    qmse = np.array([p.report.model_qmse for p in points], dtype=np.float64)
    top1 = np.array([p.report.top1_agreement for p in points], dtype=np.float64)

    if np.ptp(qmse) == 0 or np.ptp(top1) == 0:
        logger.warning("No variance in QMSE or agreement; correlation set to 0")
        return 0.0
    if np.ptp(qmse) <= 1e-9 * max(float(np.max(np.abs(qmse))), 1e-30):
        logger.warning("Low-variance QMSE series; correlation is not informative")
    rho, _ = spearmanr(qmse, top1)
    return float(rho)


def qe_accuracy_correlation(
    spec: NetworkSpec,
    f32_weights: ModelWeights,
    batch: np.ndarray,
    bits: Sequence[Union[int, BitWidth]],
    k: int = 5,
) -> float:
    """Rank correlation of QMSE against top-1 agreement over bit-widths.

    Raises:
        InferenceError: With fewer than 3 bit-widths
    """
    if len(list(bits)) < MIN_CURVE_POINTS:
        raise InferenceError(f"Correlation needs at least {MIN_CURVE_POINTS} bit-widths")
    return correlation_from_curve(qe_accuracy_curve(spec, f32_weights, batch, bits, k))
