"""
Model weight I/O for bitalloc.
Loads and writes weight sets in a neutral container (JSON manifest plus raw
little-endian f32 blobs), materializes quantized models and generates seeded
synthetic models for desk-scale experiments.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .quant import (
    BitWidth,
    QuantError,
    QuantParams,
    QuantizedTensor,
    as_tensor,
    dequantize,
    quantize,
)
from .utils import UtilsError, read_json, write_json


logger = logging.getLogger("bitalloc.model_io")

F32 = np.dtype("<f4")
CODE_DTYPE = np.dtype("i1")
QUANTIZED_FORMAT = "bitalloc-quantized/1"


class ModelIOError(Exception):
    """Base exception for model I/O operations."""
    pass


class LayerType(str, Enum):
    """Layer typology used by the sensitivity ablations."""
    FIRST_CONV = "FirstConv"
    CONV3X3 = "Conv3x3"
    CONV1X1 = "Conv1x1"
    FULLY_CONNECTED = "FullyConnected"
    OTHER = "Other"

    @classmethod
    def parse(cls, value: Union["LayerType", str]) -> "LayerType":
        try:
            return cls(value)
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ModelIOError(f"Unknown layer_type '{value}', expected one of: {valid}")


@dataclass(frozen=True, eq=False)
class LayerRecord:
    """One named weight tensor with its position and type tag."""
    name: str
    position: int
    layer_type: LayerType
    weights: np.ndarray

    def __post_init__(self) -> None:
        if not self.name:
            raise ModelIOError("Layer name cannot be empty")
        if int(self.position) != self.position or self.position < 0:
            raise ModelIOError(f"Invalid position {self.position} for layer {self.name}")
        try:
            weights = as_tensor(self.weights)
        except QuantError as e:
            if "non-finite" in str(e):
                raise ModelIOError(f"non-finite weight in {self.name}")
            raise ModelIOError(f"Invalid weights for layer {self.name}: {e}")
        weights = weights.copy()
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "position", int(self.position))
        object.__setattr__(self, "layer_type", LayerType.parse(self.layer_type))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.weights.shape)

    @property
    def size(self) -> int:
        return int(self.weights.size)

    def with_weights(self, weights: np.ndarray) -> "LayerRecord":
        """Same metadata, new weight values of identical shape."""
        weights = np.asarray(weights, dtype=np.float32)
        if weights.shape != self.weights.shape:
            raise ModelIOError(
                f"Shape mismatch for layer {self.name}: {weights.shape} vs {self.shape}"
            )
        return LayerRecord(self.name, self.position, self.layer_type, weights)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Ordered, immutable set of layers; layer order equals position order."""
    model_name: str
    layers: Tuple[LayerRecord, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ModelIOError("Model must contain at least one layer")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise ModelIOError(f"duplicate layer: {', '.join(duplicates)}")
        positions = [layer.position for layer in layers]
        if positions != list(range(len(layers))):
            raise ModelIOError(f"non-contiguous positions: {positions}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_layers(cls, model_name: str, layers: Sequence[LayerRecord]) -> "ModelWeights":
        """Build a model after ordering the layers by position."""
        return cls(model_name, tuple(sorted(layers, key=lambda layer: layer.position)))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerRecord]:
        return iter(self.layers)

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    @property
    def total_elements(self) -> int:
        return sum(layer.size for layer in self.layers)

    def layer(self, name: str) -> LayerRecord:
        for record in self.layers:
            if record.name == name:
                return record
        raise ModelIOError(f"Layer not found: {name}")

    def types_present(self) -> List[LayerType]:
        """Layer types in the model, in LayerType declaration order."""
        present = {layer.layer_type for layer in self.layers}
        return [t for t in LayerType if t in present]

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "ModelWeights":
        """Copy of the model with the given layers' values replaced."""
        unknown = set(weights) - set(self.layer_names)
        if unknown:
            raise ModelIOError(f"Unknown layers: {', '.join(sorted(unknown))}")
        return ModelWeights(
            self.model_name,
            tuple(
                layer.with_weights(weights[layer.name]) if layer.name in weights else layer
                for layer in self.layers
            ),
        )


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Quantized codes of one layer, with the layer's metadata."""
    name: str
    position: int
    layer_type: LayerType
    quantized: QuantizedTensor

    @property
    def bits(self) -> int:
        return self.quantized.bit_width.bits


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """A model whose every layer is held as integer codes."""
    model_name: str
    layers: Tuple[QuantizedLayer, ...]
    allocation: Dict[str, Any] = field(default_factory=dict)

    @property
    def bits_by_layer(self) -> Dict[str, int]:
        return {layer.name: layer.bits for layer in self.layers}

    def layer(self, name: str) -> QuantizedLayer:
        for record in self.layers:
            if record.name == name:
                return record
        raise ModelIOError(f"Layer not found: {name}")

    def dequantize(self) -> ModelWeights:
        """Simulated-quantization weights: every layer back in f32."""
        return ModelWeights(
            self.model_name,
            tuple(
                LayerRecord(q.name, q.position, q.layer_type, dequantize(q.quantized))
                for q in self.layers
            ),
        )


@dataclass(frozen=True)
class CompressionReport:
    """Storage sizes of a model before and after quantization, in bytes."""
    f32_bytes: int
    stored_bytes: int
    theoretical_bytes: float

    @property
    def ratio(self) -> float:
        return self.f32_bytes / self.theoretical_bytes


def _is_count(value: Any) -> bool:
    """Non-negative JSON integer; bools and floats do not count."""
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _blob_name(position: int, name: str, suffix: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{position:04d}_{safe}{suffix}"


def _allocation_bits(allocation: Any) -> Dict[str, int]:
    # BitAllocation or a plain name -> bits mapping
    bits = getattr(allocation, "per_layer_bits", allocation)
    return {name: int(b) for name, b in dict(bits).items()}


def check_coverage(model: ModelWeights, bits_by_layer: Mapping[str, Any]) -> None:
    """Ensure an allocation names every layer of the model and nothing else.

    Raises:
        ModelIOError: If layers are missing or unknown
    """
    names = set(model.layer_names)
    missing = [n for n in model.layer_names if n not in bits_by_layer]
    unknown = sorted(set(bits_by_layer) - names)
    if missing:
        raise ModelIOError(f"Allocation missing layer(s): {', '.join(missing)}")
    if unknown:
        raise ModelIOError(
            f"Allocation names layer(s) not in model {model.model_name}: {', '.join(unknown)}"
        )


def classify_layer(shape: Sequence[int], position: int, is_last: bool) -> LayerType:
    """Heuristic layer type from a weight shape.

    4-D weights are treated as (out, in, kh, kw) convolutions; the first 3x3
    convolution is the stem. A 2-D final layer is the classifier. Anything else,
    including strided downsample shortcuts that cannot be told apart from
    shape alone, is Other.
    """
    shape = tuple(shape)
    if len(shape) == 4:
        kernel = shape[2:]
        if kernel == (3, 3):
            return LayerType.FIRST_CONV if position == 0 else LayerType.CONV3X3
        if kernel == (1, 1):
            return LayerType.CONV1X1
    if len(shape) == 2 and is_last:
        return LayerType.FULLY_CONNECTED
    return LayerType.OTHER


class ModelLoader:
    """Reader for the neutral model container.

    The manifest lists each layer's name, position, type tag, shape and blob
    file; blobs hold raw little-endian f32 values in row-major order.
    """

    REQUIRED_KEYS: ClassVar[set] = {"name", "position", "layer_type", "shape", "blob"}

    def __init__(self, manifest_path: Union[str, Path]) -> None:
        self.manifest_path = Path(manifest_path)
        if not self.manifest_path.is_file():
            raise ModelIOError(f"manifest not found: {self.manifest_path}")
        self.root = self.manifest_path.parent
        try:
            self.manifest = read_json(self.manifest_path)
        except (UtilsError, OSError) as e:
            logger.error(f"Failed to read manifest {self.manifest_path}: {e}")
            raise ModelIOError(f"Manifest reading failed: {e}")
        self._validate_manifest()

    def _validate_manifest(self) -> None:
        if not isinstance(self.manifest, dict) or "layers" not in self.manifest:
            raise ModelIOError("Manifest must be an object with a 'layers' list")
        if not isinstance(self.manifest["layers"], list) or not self.manifest["layers"]:
            raise ModelIOError("Manifest lists no layers")
        for index, entry in enumerate(self.manifest["layers"]):
            if not isinstance(entry, dict):
                raise ModelIOError(f"Manifest entry {index} is not an object: {entry!r}")
            missing = self.REQUIRED_KEYS - set(entry)
            if missing:
                raise ModelIOError(
                    f"Manifest entry {entry.get('name', '?')} lacks: {', '.join(sorted(missing))}"
                )
            self._validate_entry(entry)

    @staticmethod
    def _validate_entry(entry: Dict[str, Any]) -> None:
        name = entry["name"]
        if not isinstance(name, str) or not name:
            raise ModelIOError(f"Invalid layer name {name!r}")
        if not _is_count(entry["position"]):
            raise ModelIOError(f"Invalid position {entry['position']!r} for layer {name}")
        shape = entry["shape"]
        if not isinstance(shape, list) or not shape or not all(_is_count(s) and s > 0 for s in shape):
            raise ModelIOError(f"Invalid shape {shape!r} for layer {name}")
        if not isinstance(entry["blob"], str):
            raise ModelIOError(f"Invalid blob {entry['blob']!r} for layer {name}")
        if "offset" in entry and not _is_count(entry["offset"]):
            raise ModelIOError(f"Invalid offset {entry['offset']!r} for layer {name}")

    def _read_blob(self, entry: Dict[str, Any], dtype: np.dtype) -> np.ndarray:
        name = entry["name"]
        shape = tuple(entry["shape"])
        blob_path = self.root / entry["blob"]
        if not blob_path.is_file():
            raise ModelIOError(f"blob not found: {name}")

        expected = int(np.prod(shape)) * dtype.itemsize
        offset = entry.get("offset", 0)
        try:
            raw = blob_path.read_bytes()
        except OSError as e:
            raise ModelIOError(f"Failed to read blob for {name}: {e}")
        if "offset" in entry:
            raw = raw[offset:offset + expected]
        if len(raw) != expected:
            logger.error(f"Layer {name}: blob holds {len(raw)} bytes, shape needs {expected}")
            raise ModelIOError(f"shape/blob mismatch: {name}")
        return np.frombuffer(raw, dtype=dtype).reshape(shape)

    def _check_positions(self) -> None:
        positions = sorted(entry["position"] for entry in self.manifest["layers"])
        if positions != list(range(len(positions))):
            raise ModelIOError(f"non-contiguous positions: {positions}")
        names = [entry["name"] for entry in self.manifest["layers"]]
        if len(set(names)) != len(names):
            raise ModelIOError("duplicate layer")

    @property
    def model_name(self) -> str:
        return str(self.manifest.get("model_name") or self.manifest_path.stem)

    def load(self) -> ModelWeights:
        """Materialize every layer and validate the model.

        Raises:
            ModelIOError: If any layer fails validation; nothing partial is returned
        """
        self._check_positions()
        records = []
        for entry in self.manifest["layers"]:
            dtype = entry.get("dtype", "f32")
            if dtype != "f32":
                raise ModelIOError(f"Unsupported dtype {dtype} for layer {entry['name']}")
            values = self._read_blob(entry, F32).astype(np.float32)
            records.append(
                LayerRecord(
                    name=entry["name"],
                    position=int(entry["position"]),
                    layer_type=LayerType.parse(entry["layer_type"]),
                    weights=values,
                )
            )
        model = ModelWeights.from_layers(self.model_name, records)
        logger.info(f"Loaded model {model.model_name}: {len(model)} layers, "
                    f"{model.total_elements} weights")
        return model

    def load_quantized(self) -> QuantizedModel:
        """Read a container written by save_quantized."""
        if self.manifest.get("format") != QUANTIZED_FORMAT:
            raise ModelIOError(f"Not a quantized container: {self.manifest_path}")
        self._check_positions()
        layers = []
        for entry in sorted(self.manifest["layers"], key=lambda e: int(e["position"])):
            codes = self._read_blob(entry, CODE_DTYPE).astype(np.int8)
            try:
                params = QuantParams(
                    scale=float(entry["scale"]),
                    zero_point=int(entry["zero_point"]),
                    bit_width=BitWidth.coerce(entry["bits"]),
                )
                quantized = QuantizedTensor(codes=codes, params=params)
            except (KeyError, TypeError, ValueError, QuantError) as e:
                raise ModelIOError(f"Invalid quantized layer {entry['name']}: {e}")
            layers.append(
                QuantizedLayer(
                    name=entry["name"],
                    position=int(entry["position"]),
                    layer_type=LayerType.parse(entry["layer_type"]),
                    quantized=quantized,
                )
            )
        return QuantizedModel(
            model_name=self.model_name,
            layers=tuple(layers),
            allocation=dict(self.manifest.get("allocation", {})),
        )


def load_model(manifest_path: Union[str, Path]) -> ModelWeights:
    """Load a model from its JSON manifest and f32 blobs.

    Raises:
        ModelIOError: On a missing manifest or blob, a shape/blob mismatch,
            duplicate names, non-contiguous positions or non-finite weights
    """
    return ModelLoader(manifest_path).load()


def load_quantized(manifest_path: Union[str, Path]) -> QuantizedModel:
    """Load a quantized container written by save_quantized."""
    return ModelLoader(manifest_path).load_quantized()


def save_model(model: ModelWeights, manifest_path: Union[str, Path]) -> Path:
    """Write a model as JSON manifest plus one f32 blob per layer.

    Raises:
        ModelIOError: If writing fails
    """
    manifest_path = Path(manifest_path)
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        entries = []
        for layer in model.layers:
            blob = _blob_name(layer.position, layer.name, ".f32")
            (manifest_path.parent / blob).write_bytes(
                np.ascontiguousarray(layer.weights, dtype=F32).tobytes()
            )
            entries.append({
                "name": layer.name,
                "position": layer.position,
                "layer_type": layer.layer_type.value,
                "shape": list(layer.shape),
                "dtype": "f32",
                "blob": blob,
            })
        write_json(manifest_path, {"model_name": model.model_name, "layers": entries})
        logger.info(f"Saved model {model.model_name} to {manifest_path}")
        return manifest_path
    except (OSError, UtilsError) as e:
        logger.error(f"Failed to save model {model.model_name}: {e}")
        raise ModelIOError(f"Model saving failed: {e}")


def quantize_model(model: ModelWeights, allocation: Any) -> QuantizedModel:
    """Quantize every layer at its allocated bit-width.

    Args:
        model: Source f32 weights
        allocation: BitAllocation or mapping of layer name to bit-width

    Raises:
        ModelIOError: If the allocation does not cover the model exactly
    """
    bits_by_layer = _allocation_bits(allocation)
    check_coverage(model, bits_by_layer)
    layers = tuple(
        QuantizedLayer(
            name=layer.name,
            position=layer.position,
            layer_type=layer.layer_type,
            quantized=quantize(layer.weights, bits_by_layer[layer.name]),
        )
        for layer in model.layers
    )
    to_dict = getattr(allocation, "to_dict", None)
    document = to_dict() if callable(to_dict) else {"bits": bits_by_layer}
    return QuantizedModel(model.model_name, layers, document)


def save_quantized(
    model: ModelWeights,
    allocation: Any,
    out_path: Union[str, Path],
) -> Path:
    """Write per-layer codes (one signed byte each), parameters and the allocation.

    Args:
        model: Source f32 weights
        allocation: BitAllocation or mapping of layer name to bit-width
        out_path: Manifest path; code blobs are written next to it

    Raises:
        ModelIOError: If the allocation does not cover the model or writing fails
    """
    quantized = quantize_model(model, allocation)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        entries = []
        for layer in quantized.layers:
            blob = _blob_name(layer.position, layer.name, ".i8")
            (out_path.parent / blob).write_bytes(
                np.ascontiguousarray(layer.quantized.codes, dtype=CODE_DTYPE).tobytes()
            )
            params = layer.quantized.params
            entries.append({
                "name": layer.name,
                "position": layer.position,
                "layer_type": layer.layer_type.value,
                "shape": list(layer.quantized.shape),
                "dtype": "i8",
                "bits": params.bit_width.bits,
                "scale": params.scale,
                "zero_point": params.zero_point,
                "blob": blob,
            })
        write_json(out_path, {
            "format": QUANTIZED_FORMAT,
            "model_name": model.model_name,
            "allocation": quantized.allocation,
            "layers": entries,
        })
        logger.info(f"Saved quantized model {model.model_name} to {out_path}")
        return out_path
    except (OSError, UtilsError) as e:
        logger.error(f"Failed to save quantized model {model.model_name}: {e}")
        raise ModelIOError(f"Quantized model saving failed: {e}")


def compression_report(model: ModelWeights, allocation: Any) -> CompressionReport:
    """f32 size, byte-per-code stored size and theoretical packed size."""
    bits_by_layer = _allocation_bits(allocation)
    check_coverage(model, bits_by_layer)
    return CompressionReport(
        f32_bytes=4 * model.total_elements,
        stored_bytes=model.total_elements,
        theoretical_bytes=sum(
            layer.size * bits_by_layer[layer.name] / 8 for layer in model.layers
        ),
    )


@dataclass(frozen=True)
class SyntheticLayer:
    """Shape and optional type tag / init std of one generated layer."""
    name: str
    shape: Tuple[int, ...]
    layer_type: Optional[LayerType] = None
    std: Optional[float] = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Description of a seeded synthetic model.

    Layers without an explicit std use He initialization, sqrt(2 / fan_in).
    """
    layers: Tuple[SyntheticLayer, ...]
    seed: int = 0
    model_name: str = "synthetic"

    @classmethod
    def uniform(
        cls,
        num_layers: int,
        shape: Sequence[int],
        seed: int = 0,
        model_name: str = "synthetic",
        layer_type: Optional[LayerType] = None,
    ) -> "SyntheticSpec":
        """num_layers layers of identical shape."""
        layers = tuple(
            SyntheticLayer(f"layer{i}", tuple(shape), layer_type) for i in range(num_layers)
        )
        return cls(layers=layers, seed=seed, model_name=model_name)


def resnet_like_spec(
    blocks: int = 4,
    width: int = 16,
    in_channels: int = 3,
    classes: int = 10,
    seed: int = 0,
    model_name: str = "resnet_like",
) -> SyntheticSpec:
    """Stem 3x3 conv, blocks of (1x1, 3x3) convs, final dense classifier.

    Produces 2 * blocks + 2 layers.
    """
    layers = [SyntheticLayer("conv1", (width, in_channels, 3, 3))]
    for i in range(blocks):
        layers.append(SyntheticLayer(f"block{i}.conv1x1", (width, width, 1, 1)))
        layers.append(SyntheticLayer(f"block{i}.conv3x3", (width, width, 3, 3)))
    layers.append(SyntheticLayer("fc", (classes, width)))
    return SyntheticSpec(layers=tuple(layers), seed=seed, model_name=model_name)


def mlp_spec(
    depth: int = 4,
    width: int = 64,
    in_features: int = 32,
    classes: int = 10,
    seed: int = 0,
    model_name: str = "mlp",
) -> SyntheticSpec:
    """depth dense layers: in_features -> width -> ... -> classes."""
    if depth < 1:
        raise ModelIOError("MLP depth must be at least 1")
    dims = [in_features] + [width] * (depth - 1) + [classes]
    layers = tuple(
        SyntheticLayer(f"dense{i}", (dims[i + 1], dims[i])) for i in range(depth)
    )
    return SyntheticSpec(layers=layers, seed=seed, model_name=model_name)


def generate_synthetic_model(spec: SyntheticSpec) -> ModelWeights:
    """Gaussian-initialized model; the same spec always yields identical weights.

    Raises:
        ModelIOError: If no layers are listed
    """
    if not spec.layers:
        raise ModelIOError("Synthetic spec must list at least one layer")

    rng = np.random.default_rng(spec.seed)
    last = len(spec.layers) - 1
    records = []
    for position, layer in enumerate(spec.layers):
        shape = tuple(int(s) for s in layer.shape)
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        std = layer.std if layer.std is not None else float(np.sqrt(2.0 / fan_in))
        weights = rng.standard_normal(shape, dtype=np.float32) * np.float32(std)
        layer_type = layer.layer_type or classify_layer(shape, position, position == last)
        records.append(LayerRecord(layer.name, position, layer_type, weights))

    model = ModelWeights(spec.model_name, tuple(records))
    logger.debug(f"Generated synthetic model {spec.model_name} (seed={spec.seed}, "
                 f"{len(model)} layers)")
    return model
