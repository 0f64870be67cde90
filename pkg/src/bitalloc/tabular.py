"""
Tabular report handling for bitalloc.
Structures result records into validated DataFrames and saves them as CSV or
JSON. Both formats are written from the same float64 frame, so they carry
identical values.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd
import pandera as pa
from pandera import Column, DataFrameSchema

from .model_io import LayerType
from .quant import SUPPORTED_BITS
from .utils import UtilsError, read_json, write_json


@dataclass
class TabularConfig:
    """Configuration for tabular data operations."""
    supported_formats: tuple = ("csv", "json")
    float_format: Optional[str] = None


class TabularError(Exception):
    """Base exception for tabular data operations."""
    pass


_BITS = Column(int, checks=pa.Check.isin(list(SUPPORTED_BITS)), nullable=False)
_FRACTION = Column(float, checks=pa.Check.in_range(0, 1), nullable=True)
_NON_NEGATIVE = Column(float, checks=pa.Check.ge(0), nullable=False)

SUMMARY_SCHEMA = DataFrameSchema(
    {
        "architecture": Column(str, nullable=False),
        "qem": Column(float, checks=pa.Check.gt(0), nullable=False),
        "layers_bit_widths": Column(str, checks=pa.Check.str_matches(r"^\d(, \d)*$"), nullable=False),
        "model_qmse": _NON_NEGATIVE,
        "fallback_layers": Column(int, checks=pa.Check.ge(0), nullable=False),
        "top1_agreement": Column(float, checks=pa.Check.in_range(0, 1), nullable=True, required=False),
        "topk_agreement": Column(float, checks=pa.Check.in_range(0, 1), nullable=True, required=False),
        "avg_loss": Column(float, checks=pa.Check.ge(0), nullable=True, required=False),
    },
    coerce=True,
)

LAYER_ALLOCATION_SCHEMA = DataFrameSchema(
    {
        "qem": Column(float, checks=pa.Check.gt(0), nullable=False),
        "position": Column(int, checks=pa.Check.ge(0), nullable=False),
        "layer": Column(str, nullable=False),
        "layer_type": Column(str, checks=pa.Check.isin([t.value for t in LayerType]), nullable=False),
        "bits": _BITS,
        "qe": _NON_NEGATIVE,
        "fallback": Column(bool, nullable=False),
    },
    coerce=True,
)

LAYER_REPORT_SCHEMA = DataFrameSchema(
    {
        "position": Column(int, checks=pa.Check.ge(0), nullable=False),
        "layer": Column(str, nullable=False),
        "layer_type": Column(str, checks=pa.Check.isin([t.value for t in LayerType]), nullable=False),
        "elements": Column(int, checks=pa.Check.gt(0), nullable=False),
        "bits": _BITS,
        "qe": _NON_NEGATIVE,
        "rqe": Column(float, nullable=False),
        "degenerate_range": Column(bool, nullable=False),
    },
    coerce=True,
)

TYPE_SWEEP_SCHEMA = DataFrameSchema(
    {
        "layer_type": Column(str, checks=pa.Check.isin([t.value for t in LayerType]), nullable=False),
        "bits": _BITS,
        "top1_agreement": _FRACTION,
        "avg_loss": Column(float, checks=pa.Check.ge(0), nullable=True),
        "model_qmse": _NON_NEGATIVE,
    },
    coerce=True,
)

RQE_SCHEMA = DataFrameSchema(
    {
        "position": Column(int, checks=pa.Check.ge(0), nullable=False),
        "layer": Column(str, nullable=False),
        "bits": _BITS,
        "rqe": Column(float, nullable=False),
        "excluded": Column(int, checks=pa.Check.ge(0), nullable=False),
    },
    coerce=True,
)

SENSITIVE_SCHEMA = DataFrameSchema(
    {
        "bits": _BITS,
        "most_sensitive_position": Column(int, checks=pa.Check.ge(0), nullable=False),
        "layer": Column(str, nullable=False),
    },
    coerce=True,
)

CURVE_SCHEMA = DataFrameSchema(
    {
        "bits": _BITS,
        "model_qmse": _NON_NEGATIVE,
        "top1_agreement": _FRACTION,
        "topk_agreement": _FRACTION,
        "avg_loss": Column(float, checks=pa.Check.ge(0), nullable=False),
    },
    coerce=True,
)

CORRELATION_SCHEMA = DataFrameSchema(
    {
        "architecture": Column(str, nullable=False),
        "points": Column(int, checks=pa.Check.ge(3), nullable=False),
        "rank_correlation": Column(float, checks=pa.Check.in_range(-1, 1), nullable=False),
    },
    coerce=True,
)

RUNTIME_SCHEMA = DataFrameSchema(
    {
        "architecture": Column(str, nullable=False),
        "layers": Column(int, checks=pa.Check.gt(0), nullable=False),
        "qems": Column(int, checks=pa.Check.gt(0), nullable=False),
        "search_seconds": _NON_NEGATIVE,
        "search_plus_quantization_seconds": _NON_NEGATIVE,
    },
    coerce=True,
)

COMPRESSION_SCHEMA = DataFrameSchema(
    {
        "architecture": Column(str, nullable=False),
        "layers_bit_widths": Column(str, nullable=False),
        "model_qmse": _NON_NEGATIVE,
        "f32_bytes": Column(int, checks=pa.Check.gt(0), nullable=False),
        "stored_bytes": Column(int, checks=pa.Check.gt(0), nullable=False),
        "theoretical_bytes": Column(float, checks=pa.Check.gt(0), nullable=False),
        "compression_ratio": Column(float, checks=pa.Check.ge(1), nullable=False),
    },
    coerce=True,
)


class Tabular:
    """Handles report frames for one output directory and format.

    Records are validated against a pandera schema before being written as
    ``<basename>.csv`` or ``<basename>.json``.
    """

    def __init__(
        self,
        output_data_path: Union[str, Path],
        output_format: str = "csv",
        config: Optional[TabularConfig] = None
    ) -> None:
        """Initialize Tabular instance.

        Args:
            output_data_path: Directory the reports are written to
            output_format: "csv" or "json"
            config: Optional configuration

        Raises:
            TabularError: If the format is not supported
        """
        self.logger = logging.getLogger("bitalloc.tabular")
        self.config = config or TabularConfig()
        self.output_data_path = Path(output_data_path)
        if output_format not in self.config.supported_formats:
            raise TabularError(
                f"Invalid output format: {output_format}. "
                f"Must be one of {self.config.supported_formats}"
            )
        self.output_format = output_format

    def structure_data(
        self,
        records: Sequence[Mapping[str, Any]],
        schema: DataFrameSchema
    ) -> pd.DataFrame:
        """Build a DataFrame from records and validate it.

        Columns come out in schema order; optional columns absent from every
        record are left out.

        Raises:
            TabularError: If records are empty or validation fails
        """
        if not records:
            raise TabularError("No records to structure")
        frame = pd.DataFrame(list(records))
        columns = [c for c in schema.columns if c in frame.columns]
        extra = [c for c in frame.columns if c not in schema.columns]
        if extra:
            raise TabularError(f"Unexpected columns: {', '.join(extra)}")
        try:
            return schema.validate(frame[columns])
        except (pa.errors.SchemaError, pa.errors.SchemaErrors) as e:
            self.logger.error(f"Schema validation failed: {e}")
            raise TabularError(f"Schema validation failed: {e}")

    def save_data(self, frame: pd.DataFrame, basename: str) -> Path:
        """Save a frame as ``<basename>.<format>`` in the output directory.

        Raises:
            TabularError: If saving fails
        """
        try:
            self.output_data_path.mkdir(parents=True, exist_ok=True)
            output_file = self.output_data_path / f"{basename}.{self.output_format}"
            if self.output_format == "csv":
                frame.to_csv(output_file, index=False, float_format=self.config.float_format)
            else:
                write_json(output_file, frame.to_dict(orient="records"))
            self.logger.info(f"Saved {len(frame)} row(s) to {output_file}")
            return output_file
        except (OSError, UtilsError) as e:
            self.logger.error(f"Failed to save data: {e}")
            raise TabularError(f"Data saving failed: {e}")

    def write(
        self,
        records: Sequence[Mapping[str, Any]],
        schema: DataFrameSchema,
        basename: str
    ) -> Path:
        """Structure, validate and save records in one step."""
        return self.save_data(self.structure_data(records, schema), basename)


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    """Read a CSV or JSON report back into a DataFrame.

    Raises:
        TabularError: If the file is missing or has an unknown extension
    """
    path = Path(path)
    if not path.is_file():
        raise TabularError(f"Report not found: {path}")
    if path.suffix == ".csv":
        return pd.read_csv(path)
    if path.suffix == ".json":
        try:
            return pd.DataFrame(read_json(path))
        except UtilsError as e:
            raise TabularError(f"Report reading failed: {e}")
    raise TabularError(f"Unknown report format: {path.suffix}")


def records_equal(left: pd.DataFrame, right: pd.DataFrame) -> bool:
    """True when two report frames hold the same columns and values.

    Numeric columns are compared as float64, NaN equal to NaN.
    """
    if list(left.columns) != list(right.columns) or len(left) != len(right):
        return False
    for column in left.columns:
        a, b = left[column], right[column]
        if pd.api.types.is_numeric_dtype(a) and pd.api.types.is_numeric_dtype(b):
            if not a.astype("float64").equals(b.astype("float64")):
                return False
        elif a.astype(str).tolist() != b.astype(str).tolist():
            return False
    return True
