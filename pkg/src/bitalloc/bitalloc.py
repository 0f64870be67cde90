"""
bitalloc - mixed-precision post-training weight quantization.
Core class wiring the modules into the command workflows.
"""

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .ini import RunConfig
from .inference import (
    NetworkSpec,
    correlation_from_curve,
    evaluate_agreement,
    load_batch,
    load_network_spec,
    qe_accuracy_curve,
    random_batch,
    save_network_spec,
)
from .model_io import (
    ModelWeights,
    SyntheticSpec,
    compression_report,
    generate_synthetic_model,
    load_model,
    mlp_spec,
    quantize_model,
    resnet_like_spec,
    save_model,
    save_quantized,
)
from .paths import Paths, qem_label
from .quant import DEFAULT_BITS, BitWidth, QuantError, has_degenerate_range, quantization_mse, relative_qe, roundtrip
from .search import (
    BitAllocation,
    ErrorTable,
    SearchError,
    build_error_table,
    format_bit_set,
    model_qmse,
    select_bitwidths,
    sweep_qems,
)
from .sensitivity import layer_position_rqe, layer_type_sweep
from .tabular import (
    COMPRESSION_SCHEMA,
    CORRELATION_SCHEMA,
    CURVE_SCHEMA,
    LAYER_ALLOCATION_SCHEMA,
    LAYER_REPORT_SCHEMA,
    RQE_SCHEMA,
    RUNTIME_SCHEMA,
    SENSITIVE_SCHEMA,
    SUMMARY_SCHEMA,
    TYPE_SWEEP_SCHEMA,
    Tabular,
)
from .utils import UtilsError, read_json, write_json


RUNTIME_QEM_COUNTS = (1, 10)


@dataclass(frozen=True)
class RuntimeReport:
    """Wall-clock of one search, with and without materializing quantized weights."""
    search_seconds: float
    search_plus_quantization_seconds: float
    layer_count: int
    qem_count: int

    def __post_init__(self) -> None:
        if self.search_seconds > self.search_plus_quantization_seconds:
            raise ValueError("search time exceeds search + quantization time")

    def to_record(self, architecture: str) -> Dict[str, Any]:
        return {
            "architecture": architecture,
            "layers": self.layer_count,
            "qems": self.qem_count,
            "search_seconds": self.search_seconds,
            "search_plus_quantization_seconds": self.search_plus_quantization_seconds,
        }


def timed_search(
    model: ModelWeights,
    qems: Sequence[float],
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
    progress: bool = False,
) -> Tuple[ErrorTable, List[BitAllocation], RuntimeReport]:
    """Search every QEM, then materialize the quantized weights of each allocation.

    "search" covers the error-table build plus selection; "search +
    quantization" adds quantizing and dequantizing every allocation.

    Raises:
        SearchError: If qems is empty or invalid
    """
    start = time.perf_counter()
    table = build_error_table(model, bits, n_jobs=n_jobs, progress=progress)
    allocations = sweep_qems(table, qems)
    search_seconds = time.perf_counter() - start

    for allocation in allocations:
        quantize_model(model, allocation).dequantize()
    total_seconds = time.perf_counter() - start

    report = RuntimeReport(
        search_seconds=search_seconds,
        search_plus_quantization_seconds=total_seconds,
        layer_count=len(model),
        qem_count=len(allocations),
    )
    return table, allocations, report


def measure_runtime(
    model: ModelWeights,
    qems: Sequence[float],
    bits: Sequence[Union[int, BitWidth]] = DEFAULT_BITS,
    n_jobs: int = 1,
) -> RuntimeReport:
    """Wall-clock of one search over qems, see timed_search."""
    return timed_search(model, qems, bits, n_jobs)[2]


def synthetic_spec(config: RunConfig) -> SyntheticSpec:
    """Synthetic model described by the [Synthetic] settings.

    resnet: stem conv, (layers - 2) // 2 blocks of 1x1/3x3 convs, classifier.
    mlp: layers dense layers of the configured width.
    """
    if config.synthetic_arch == "mlp":
        spec = mlp_spec(
            depth=config.synthetic_layers,
            width=config.synthetic_width,
            in_features=config.synthetic_width,
            classes=config.classes,
            seed=config.seed,
        )
    else:
        blocks = (config.synthetic_layers - 2) // 2
        if 2 * blocks + 2 != config.synthetic_layers:
            logging.getLogger("bitalloc.bitalloc").warning(
                f"resnet models have an even layer count; using {2 * blocks + 2}"
            )
        spec = resnet_like_spec(
            blocks=blocks,
            width=config.synthetic_width,
            classes=config.classes,
            seed=config.seed,
        )
    if config.synthetic_std is not None:
        spec = replace(spec, layers=tuple(replace(layer, std=config.synthetic_std) for layer in spec.layers))
    return spec


class BitAlloc:
    """Runs one configured command and writes its artifacts."""

    # Fixed input resolution of networks chained from conv models
    INPUT_HW = (8, 8)

    def __init__(self, config: RunConfig, root_path: Optional[Union[str, Path]] = None) -> None:
        """Initialize the runner.

        Args:
            config: Validated run configuration
            root_path: Base for a relative output directory, the working
                directory by default
        """
        self.config = config
        self.logger = logging.getLogger("bitalloc.bitalloc")
        self.paths = Paths(root_path or Path.cwd(), config.out_dir)
        self.tabular = Tabular(self.paths.get_out_dir(), config.output_format)
        self._model: Optional[ModelWeights] = None
        self._network: Optional[NetworkSpec] = None

    @property
    def workflows(self) -> Dict[str, Callable[[], List[Path]]]:
        return {
            "quantize": self.quantize,
            "search": self.search,
            "sweep": self.sweep,
            "ablate": self.ablate,
            "correlate": self.correlate,
            "report": self.report,
            "runtime": self.runtime,
            "generate": self.generate,
        }

    def run(self) -> List[Path]:
        """Run the configured command; returns the written artifacts."""
        self.paths.ensure_out_dir()
        written = self.workflows[self.config.command]()
        self.logger.info(f"{self.config.command}: wrote {len(written)} artifact(s) to "
                         f"{self.paths.get_out_dir()}")
        return written

    @property
    def model(self) -> ModelWeights:
        """The model named by --model, or the configured synthetic model."""
        if self._model is None:
            if self.config.model is not None:
                model = load_model(self.config.model)
            else:
                model = generate_synthetic_model(synthetic_spec(self.config))
                self.logger.info(f"No model given, using synthetic {model.model_name} "
                                 f"(seed={self.config.seed}, {len(model)} layers)")
            for layer in model.layers:
                if has_degenerate_range(layer.weights):
                    self.logger.warning(f"Layer {layer.name} has a degenerate range (max == min)")
            self._model = model
        return self._model

    @property
    def name(self) -> str:
        return self.model.model_name

    def _network_spec(self, required: bool) -> Optional[NetworkSpec]:
        if self._network is None:
            if self.config.network is not None:
                self._network = load_network_spec(self.config.network)
            elif required or self.config.evaluate:
                self._network = NetworkSpec.from_model(self.model, self.INPUT_HW)
        return self._network

    def _batch(self, spec: NetworkSpec) -> np.ndarray:
        if self.config.batch is not None:
            return load_batch(self.config.batch, spec)
        return random_batch(spec, self.config.batch_size, self.config.seed)

    def _allocation(self) -> Union[BitAllocation, Dict[str, int]]:
        """Allocation from --allocation, else --uniform, else a search at the first QEM."""
        if self.config.allocation is not None:
            try:
                document = read_json(self.config.allocation)
            except (UtilsError, FileNotFoundError) as e:
                raise SearchError(f"Allocation reading failed: {e}")
            if isinstance(document, Mapping) and "qem" in document and "bits" in document:
                return BitAllocation.from_dict(document)
            bits = document.get("bits", document) if isinstance(document, Mapping) else None
            if not isinstance(bits, Mapping):
                raise SearchError(f"Allocation document has no layer bits: {self.config.allocation}")
            try:
                return {name: BitWidth.coerce(b).bits for name, b in bits.items()}
            except QuantError as e:
                raise SearchError(f"Invalid allocation {self.config.allocation}: {e}")
        if self.config.uniform_bits is not None:
            return {name: self.config.uniform_bits for name in self.model.layer_names}
        if not self.config.qems:
            raise SearchError("A QEM, an allocation file or a uniform bit-width is required")
        table = build_error_table(self.model, self.config.bits, self.config.num_jobs, self.config.progress)
        return select_bitwidths(table, self.config.qems[0])

    def _summary_row(self, allocation: BitAllocation, table: ErrorTable) -> Dict[str, Any]:
        return {
            "architecture": self.name,
            "qem": allocation.qem,
            "layers_bit_widths": format_bit_set(allocation.bit_set),
            "model_qmse": model_qmse(self.model, allocation, table),
            "fallback_layers": len(allocation.fallback_layers),
        }

    def _compression_row(self, allocation: Union[BitAllocation, Mapping[str, int]]) -> Dict[str, Any]:
        sizes = compression_report(self.model, allocation)
        bits = getattr(allocation, "per_layer_bits", allocation)
        return {
            "architecture": self.name,
            "layers_bit_widths": format_bit_set(set(bits.values())),
            "model_qmse": model_qmse(self.model, allocation),
            "f32_bytes": sizes.f32_bytes,
            "stored_bytes": sizes.stored_bytes,
            "theoretical_bytes": sizes.theoretical_bytes,
            "compression_ratio": sizes.ratio,
        }

    def search(self) -> List[Path]:
        """Table, one allocation JSON per QEM, summary and runtime."""
        table, allocations, runtime = timed_search(
            self.model, self.config.qems, self.config.bits, self.config.num_jobs, self.config.progress
        )

        written = [write_json(self.paths.artifact("search", self.name, "json", "errors"), table.to_dict())]
        for allocation in allocations:
            path = self.paths.artifact("search", self.name, "json", qem_label(allocation.qem))
            written.append(write_json(path, {"model_name": self.name, **allocation.to_dict()}))
        written.append(self.tabular.write(
            [self._summary_row(a, table) for a in allocations],
            SUMMARY_SCHEMA,
            self.paths.basename("search", self.name),
        ))
        written.append(self.tabular.write(
            [runtime.to_record(self.name)],
            RUNTIME_SCHEMA,
            self.paths.basename("search", self.name, "runtime"),
        ))
        return written

    def sweep(self) -> List[Path]:
        """Summary row per QEM in increasing order, plus per-layer allocations."""
        model = self.model
        qems = sorted(self.config.qems)
        table = build_error_table(model, self.config.bits, self.config.num_jobs, self.config.progress)
        allocations = sweep_qems(table, qems)

        spec = self._network_spec(required=False) if self.config.evaluate else None
        batch = self._batch(spec) if spec is not None else None

        rows = []
        layer_rows = []
        for allocation in allocations:
            row = self._summary_row(allocation, table)
            if spec is not None:
                report = evaluate_agreement(
                    spec, model, quantize_model(model, allocation).dequantize(), batch, self.config.topk
                )
                row.update(
                    top1_agreement=report.top1_agreement,
                    topk_agreement=report.topk_agreement,
                    avg_loss=report.avg_loss,
                )
            rows.append(row)
            for layer in model.layers:
                bits = allocation.per_layer_bits[layer.name]
                layer_rows.append({
                    "qem": allocation.qem,
                    "position": layer.position,
                    "layer": layer.name,
                    "layer_type": layer.layer_type.value,
                    "bits": bits,
                    "qe": table.lookup(layer.name, bits),
                    "fallback": layer.name in allocation.fallback_layers,
                })

        return [
            self.tabular.write(rows, SUMMARY_SCHEMA, self.paths.basename("sweep", self.name)),
            self.tabular.write(layer_rows, LAYER_ALLOCATION_SCHEMA, self.paths.basename("sweep", self.name, "layers")),
        ]

    def ablate(self) -> List[Path]:
        """Layer-type sweep, per-position RQE and the most sensitive position per bit-width."""
        model = self.model
        spec = self._network_spec(required=False)
        if spec is None:
            self.logger.warning("No evaluation network (--network or --eval); "
                                "top1_agreement and avg_loss are left empty")
            evaluate = None
        else:
            batch = self._batch(spec)
            topk = self.config.topk

            def evaluate(quantized: ModelWeights):
                return evaluate_agreement(spec, model, quantized, batch, topk)

        types = layer_type_sweep(model, evaluate, self.config.bits, self.config.num_jobs)
        rqe = layer_position_rqe(model, self.config.bits, self.config.num_jobs)
        return [
            self.tabular.write([r.to_record() for r in types], TYPE_SWEEP_SCHEMA,
                               self.paths.basename("ablate", self.name)),
            self.tabular.write(rqe.to_records(), RQE_SCHEMA,
                               self.paths.basename("ablate", self.name, "rqe")),
            self.tabular.write(rqe.summary_records(), SENSITIVE_SCHEMA,
                               self.paths.basename("ablate", self.name, "sensitive")),
        ]

    def correlate(self) -> List[Path]:
        """QMSE/agreement/loss per uniform bit-width and their rank correlation."""
        spec = self._network_spec(required=True)
        batch = self._batch(spec)
        curve = qe_accuracy_curve(spec, self.model, batch, self.config.bits, self.config.topk)
        rho = correlation_from_curve(curve)
        self.logger.info(f"Rank correlation of QMSE and top-1 agreement: {rho:.4f}")

        rows = [
            {
                "bits": point.bits,
                "model_qmse": point.report.model_qmse,
                "top1_agreement": point.report.top1_agreement,
                "topk_agreement": point.report.topk_agreement,
                "avg_loss": point.report.avg_loss,
            }
            for point in curve
        ]
        summary = [{"architecture": self.name, "points": len(curve), "rank_correlation": rho}]
        return [
            self.tabular.write(rows, CURVE_SCHEMA, self.paths.basename("correlate", self.name)),
            self.tabular.write(summary, CORRELATION_SCHEMA, self.paths.basename("correlate", self.name, "rho")),
        ]

    def quantize(self) -> List[Path]:
        """Quantized container plus a compression report."""
        allocation = self._allocation()
        directory = self.paths.get_out_dir() / self.paths.basename("quantize", self.name)
        manifest = save_quantized(self.model, allocation, directory / "manifest.json")
        report = self.tabular.write(
            [self._compression_row(allocation)],
            COMPRESSION_SCHEMA,
            self.paths.basename("quantize", self.name),
        )
        return [manifest, report]

    def report(self) -> List[Path]:
        """Per-layer QE/RQE of an allocation and its storage sizes."""
        allocation = self._allocation()
        bits = getattr(allocation, "per_layer_bits", allocation)
        rows = []
        for layer in self.model.layers:
            b = int(bits[layer.name])
            restored = roundtrip(layer.weights, b)
            rows.append({
                "position": layer.position,
                "layer": layer.name,
                "layer_type": layer.layer_type.value,
                "elements": layer.size,
                "bits": b,
                "qe": float(quantization_mse(layer.weights, restored)),
                "rqe": float(relative_qe(layer.weights, restored)),
                "degenerate_range": has_degenerate_range(layer.weights),
            })
        return [
            self.tabular.write(rows, LAYER_REPORT_SCHEMA, self.paths.basename("report", self.name)),
            self.tabular.write([self._compression_row(allocation)], COMPRESSION_SCHEMA,
                               self.paths.basename("report", self.name, "size")),
        ]

    def _runtime_qems(self, count: int) -> List[float]:
        if len(self.config.qems) >= count:
            return list(self.config.qems[:count])
        return [float(q) for q in range(1, count + 1)]

    def runtime(self) -> List[Path]:
        """Runtime for 1 and 10 QEMs."""
        rows = []
        for count in RUNTIME_QEM_COUNTS:
            report = measure_runtime(self.model, self._runtime_qems(count), self.config.bits, self.config.num_jobs)
            self.logger.info(f"{count} QEM(s): search {report.search_seconds:.3f}s, "
                             f"search + quantization {report.search_plus_quantization_seconds:.3f}s")
            rows.append(report.to_record(self.name))
        return [self.tabular.write(rows, RUNTIME_SCHEMA, self.paths.basename("runtime", self.name))]

    def generate(self) -> List[Path]:
        """Seeded synthetic model and its network spec."""
        model = generate_synthetic_model(synthetic_spec(self.config))
        directory = self.paths.get_out_dir() / self.paths.basename("generate", model.model_name)
        manifest = save_model(model, directory / "manifest.json")
        network = save_network_spec(NetworkSpec.from_model(model, self.INPUT_HW), directory / "network.json")
        return [manifest, network]
