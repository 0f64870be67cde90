"""
bitalloc - mixed-precision post-training weight quantization.

This package provides tools for:
- Asymmetric per-tensor quantization of f32 weights to 2..8-bit codes
- Searching the smallest per-layer bit-width within a QEM-scaled int8 error bound
- Layer-type and layer-position sensitivity ablations
- A minimal f32 inference engine for quantization agreement checks
- Loading, writing and generating models in a manifest + blob container
"""

__version__ = "0.1.0"

from .bitalloc import BitAlloc, RuntimeReport, measure_runtime
from .inference import EvalReport, InferenceError, NetworkSpec
from .ini import Ini, IniError, RunConfig
from .model_io import LayerType, ModelIOError, ModelWeights, QuantizedModel
from .paths import Paths, PathsError
from .quant import BitWidth, QuantError, QuantizedTensor, dequantize, quantize
from .search import BitAllocation, ErrorTable, SearchError, build_error_table, select_bitwidths
from .sensitivity import PositionRqeTable, SensitivityError, TypeSweepResult
from .tabular import Tabular, TabularError

__all__ = [
    # Core components
    "BitAlloc",
    "RuntimeReport",
    "measure_runtime",
    "BitWidth",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "ModelWeights",
    "QuantizedModel",
    "LayerType",
    "ErrorTable",
    "BitAllocation",
    "build_error_table",
    "select_bitwidths",
    "TypeSweepResult",
    "PositionRqeTable",
    "NetworkSpec",
    "EvalReport",
    "Ini",
    "RunConfig",
    "Paths",
    "Tabular",

    # Error classes
    "QuantError",
    "ModelIOError",
    "SearchError",
    "SensitivityError",
    "InferenceError",
    "IniError",
    "PathsError",
    "TabularError",
]
