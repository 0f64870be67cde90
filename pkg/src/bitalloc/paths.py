"""
Path management for bitalloc runs.
Resolves the output directory and names every artifact
``<command>_<model_name>[_<suffix>].<ext>``.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union


@dataclass
class PathsConfig:
    """Configuration for path operations."""
    default_out_dir: str = "results"
    separator: str = "_"


class PathsError(Exception):
    """Base exception for path operations."""
    pass


class Paths:
    """Handles output paths of one run.

    Relative output directories are resolved against the base path, which
    is the directory of the configuration file or the working directory.
    """

    def __init__(
        self,
        path: Union[str, Path],
        out_dir: Optional[Union[str, Path]] = None,
        config: Optional[PathsConfig] = None
    ) -> None:
        """Initialize Paths instance.

        Args:
            path: Base path for relative output directories
            out_dir: Output directory, absolute or relative to path
            config: Optional path configuration

        Raises:
            PathsError: If the output directory cannot be resolved
        """
        self.logger = logging.getLogger("bitalloc.paths")
        self.config = config or PathsConfig()

        try:
            self.path = Path(path).resolve()
            self.out_dir = self.set_out_dir(out_dir or self.config.default_out_dir)
        except OSError as e:
            self.logger.error(f"Failed to initialize paths: {e}")
            raise PathsError(f"Path initialization failed: {e}")

    def set_out_dir(self, out_dir: Union[str, Path]) -> Path:
        """Resolve the output directory; it is created on first write.

        Raises:
            PathsError: If the path exists and is not a directory
        """
        out_dir = Path(out_dir)
        if not out_dir.is_absolute():
            out_dir = self.path / out_dir
        if out_dir.exists() and not out_dir.is_dir():
            self.logger.error(f"Output path is not a directory: {out_dir}")
            raise PathsError(f"Output path is not a directory: {out_dir}")
        return out_dir.resolve()

    def get_out_dir(self) -> Path:
        return self.out_dir

    def ensure_out_dir(self) -> Path:
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise PathsError(f"Output directory creation failed: {e}")
        return self.out_dir

    def basename(self, command: str, model_name: str, suffix: Optional[str] = None) -> str:
        """Artifact stem without extension, e.g. ``ablate_resnet_rqe``."""
        sep = self.config.separator
        parts = [command, safe_name(model_name)]
        if suffix:
            parts.append(safe_name(suffix))
        return sep.join(parts)

    def artifact(
        self,
        command: str,
        model_name: str,
        ext: str,
        suffix: Optional[str] = None
    ) -> Path:
        """Full artifact path inside the output directory."""
        return self.out_dir / f"{self.basename(command, model_name, suffix)}.{ext.lstrip('.')}"


def safe_name(name: str) -> str:
    """Replace characters that do not belong in file names."""
    cleaned = re.sub(r"[^A-Za-z0-9_.+-]+", "-", str(name)).strip("-")
    if not cleaned:
        raise PathsError(f"Cannot build a file name from {name!r}")
    return cleaned


def qem_label(qem: float) -> str:
    """Compact QEM tag for file names, e.g. ``qem2`` or ``qem0.5``."""
    return f"qem{float(qem):g}"
