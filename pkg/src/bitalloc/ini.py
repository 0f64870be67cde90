"""
Configuration for bitalloc runs.
Reads INI files into typed sections and assembles the validated RunConfig,
layering command-line values over the environment, the INI file and the
dataclass defaults.
"""

import configparser
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from .paths import Paths, PathsError
from .quant import DEFAULT_BITS, SUPPORTED_BITS
from .search import SearchError, normalize_bits
from .utils import UtilsError, parse_number_list


logger = logging.getLogger("bitalloc.ini")

COMMANDS = ("quantize", "search", "sweep", "ablate", "correlate", "report", "runtime", "generate")
QEM_COMMANDS = ("search", "sweep")
FORMATS = ("csv", "json")
ARCHITECTURES = ("resnet", "mlp")

ENV_CONFIG = "BITALLOC_CONFIG"
ENV_NUM_JOBS = "BITALLOC_NUM_JOBS"


def _int_list(value: str) -> List[int]:
    return parse_number_list(value, int)


def _float_list(value: str) -> List[float]:
    return parse_number_list(value, float)


def _optional_float(value: str) -> Optional[float]:
    return None if value.strip().lower() in ("", "none", "he") else float(value)


DEFAULT_SECTIONS_SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "Paths": {"out_dir": str},
    "Search": {"bits": _int_list, "qems": _float_list, "num_jobs": int},
    "Output": {"format": str},
    "Synthetic": {"seed": int, "arch": str, "layers": int, "width": int, "std": _optional_float},
    "Inference": {"batch_size": int, "topk": int, "classes": int},
}

# (section, parameter) -> RunConfig field
INI_FIELDS: Dict[Tuple[str, str], str] = {
    ("Paths", "out_dir"): "out_dir",
    ("Search", "bits"): "bits",
    ("Search", "qems"): "qems",
    ("Search", "num_jobs"): "num_jobs",
    ("Output", "format"): "output_format",
    ("Synthetic", "seed"): "seed",
    ("Synthetic", "arch"): "synthetic_arch",
    ("Synthetic", "layers"): "synthetic_layers",
    ("Synthetic", "width"): "synthetic_width",
    ("Synthetic", "std"): "synthetic_std",
    ("Inference", "batch_size"): "batch_size",
    ("Inference", "topk"): "topk",
    ("Inference", "classes"): "classes",
}


class IniError(Exception):
    """Base exception for INI file and run configuration errors."""
    pass


class Ini:
    """Parser for INI configuration files.

    Every parameter listed in the sections schema is cast with its own
    converter. Parameters absent from the file are simply not set, so a
    partial file only overrides what it names.
    """

    def __init__(
        self,
        config_path: Union[str, Path],
        sections_schema: Optional[Dict[str, Dict[str, Callable[[str], Any]]]] = None
    ) -> None:
        """Initialize the INI file parser.

        Args:
            config_path: Path to the INI configuration file
            sections_schema: Section -> parameter -> converter

        Raises:
            IniError: If the file is missing or a value cannot be cast
        """
        self.logger = logging.getLogger("bitalloc.ini")
        self.config_path = Path(config_path).resolve()
        self.root_path = self.config_path.parent
        self.sections_schema = sections_schema or DEFAULT_SECTIONS_SCHEMA
        self.params: Dict[str, Dict[str, Any]] = {}

        self._validate_config_file()
        self._load_config()
        self._setup_paths()

    def _validate_config_file(self) -> None:
        if not self.config_path.is_file():
            raise IniError(f"Configuration file not found: {self.config_path}")
        if not os.access(self.config_path, os.R_OK):
            raise IniError(f"Configuration file not readable: {self.config_path}")

    def _cast_value(self, section: str, param: str, value: str) -> Any:
        caster = self.sections_schema[section][param]
        try:
            return caster(value)
        except (ValueError, UtilsError) as e:
            self.logger.error(f"Error reading parameter '{param}' from section '{section}': {e}")
            raise IniError(f"Parameter reading failed: [{section}] {param} = {value!r}: {e}")

    def _load_config(self) -> None:
        parser = configparser.ConfigParser()
        try:
            parser.read(self.config_path, encoding="utf-8")
        except configparser.Error as e:
            self.logger.error(f"Failed to load configuration: {e}")
            raise IniError(f"Configuration loading failed: {e}")

        for section, params in self.sections_schema.items():
            section_params = {}
            if parser.has_section(section):
                for param in params:
                    if parser.has_option(section, param):
                        section_params[param] = self._cast_value(
                            section, param, parser.get(section, param)
                        )
            self.params[section] = section_params

        self.logger.info(f"Loaded configuration from {self.config_path}")

    def _setup_paths(self) -> None:
        # out_dir in a config file is relative to that file
        out_dir = self.params.get("Paths", {}).get("out_dir")
        if out_dir is None:
            return
        try:
            self.params["Paths"]["out_dir"] = str(Paths(self.root_path, out_dir).get_out_dir())
        except PathsError as e:
            self.logger.error(f"Failed to setup paths: {e}")
            raise IniError(f"Path setup failed: {e}")

    def get_section(self, section: str) -> Dict[str, Any]:
        """Parameters of one section.

        Raises:
            IniError: If the section is not in the schema
        """
        if section not in self.params:
            raise IniError(f"Section not found: {section}")
        return self.params[section]

    def run_config_values(self) -> Dict[str, Any]:
        """Parameters keyed by RunConfig field name."""
        values = {}
        for (section, param), name in INI_FIELDS.items():
            params = self.get_section(section)
            if param in params:
                values[name] = params[param]
        return values

    def __repr__(self) -> str:
        return f"Configuration parameters: {self.params}"


@dataclass
class RunConfig:
    """Validated settings of one command run."""
    command: str
    model: Optional[Path] = None
    bits: Tuple[int, ...] = DEFAULT_BITS
    qems: Tuple[float, ...] = (1.0,)
    out_dir: Path = Path("results")
    seed: int = 0
    output_format: str = "csv"
    evaluate: bool = False
    topk: int = 5
    network: Optional[Path] = None
    batch: Optional[Path] = None
    batch_size: int = 512
    allocation: Optional[Path] = None
    uniform_bits: Optional[int] = None
    num_jobs: int = 1
    progress: bool = False
    synthetic_arch: str = "resnet"
    synthetic_layers: int = 10
    synthetic_width: int = 16
    synthetic_std: Optional[float] = None
    classes: int = 10

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise IniError(f"Unknown command '{self.command}', expected one of {COMMANDS}")
        try:
            self.bits = normalize_bits(self.bits)
        except SearchError as e:
            raise IniError(f"Invalid bits: {e}")
        self.qems = self._validate_qems(self.qems)
        if self.command in QEM_COMMANDS and not self.qems:
            raise IniError(f"qem list must be non-empty for {self.command}")
        if self.command == "correlate" and len(self.bits) < 3:
            raise IniError("correlate needs at least 3 bit-widths")
        if self.output_format not in FORMATS:
            raise IniError(f"Invalid format '{self.output_format}', expected one of {FORMATS}")
        if self.uniform_bits is not None and self.uniform_bits not in SUPPORTED_BITS:
            raise IniError(f"Invalid uniform bit-width {self.uniform_bits}")
        if self.synthetic_arch not in ARCHITECTURES:
            raise IniError(f"Invalid architecture '{self.synthetic_arch}', expected one of {ARCHITECTURES}")
        if self.synthetic_std is not None and not self.synthetic_std > 0:
            raise IniError(f"std must be positive, got {self.synthetic_std}")
        for name in ("topk", "batch_size", "synthetic_width", "classes"):
            if getattr(self, name) < 1:
                raise IniError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.synthetic_layers < 2:
            raise IniError(f"layers must be at least 2, got {self.synthetic_layers}")
        if self.num_jobs == 0:
            raise IniError("num_jobs cannot be 0")
        if self.seed < 0:
            raise IniError(f"seed must be non-negative, got {self.seed}")
        for name in ("model", "out_dir", "network", "batch", "allocation"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))

    @staticmethod
    def _validate_qems(qems: Any) -> Tuple[float, ...]:
        unique: List[float] = []
        for qem in qems or ():
            try:
                value = float(qem)
            except (TypeError, ValueError):
                raise IniError(f"Invalid QEM: {qem!r}")
            if not value > 0 or value == float("inf"):
                raise IniError(f"QEM must be positive and finite, got {qem}")
            if value in unique:
                logger.warning(f"Duplicate QEM {value:g} ignored")
                continue
            unique.append(value)
        return tuple(unique)


def load_run_config(
    overrides: Mapping[str, Any],
    config_path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Assemble a RunConfig from every configuration layer.

    Precedence: overrides (command line) > environment > INI file > defaults.
    The INI file is config_path, else the one named by BITALLOC_CONFIG.

    Args:
        overrides: RunConfig fields; None values are ignored
        config_path: Optional INI file
        environ: Environment mapping, os.environ by default

    Raises:
        IniError: If any layer holds an invalid value
    """
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}

    ini_path = config_path or environ.get(ENV_CONFIG)
    if ini_path:
        values.update(Ini(ini_path).run_config_values())

    if environ.get(ENV_NUM_JOBS):
        try:
            values["num_jobs"] = int(environ[ENV_NUM_JOBS])
        except ValueError:
            raise IniError(f"{ENV_NUM_JOBS} must be an integer, got {environ[ENV_NUM_JOBS]!r}")

    known = {f.name for f in fields(RunConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise IniError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")
    values.update({k: v for k, v in overrides.items() if v is not None})

    if "command" not in values:
        raise IniError("No command given")
    return RunConfig(**values)
