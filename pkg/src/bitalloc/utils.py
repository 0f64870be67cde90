"""
Utility functions for bitalloc.
Provides logging setup and JSON handling shared by every module.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UtilsError(Exception):
    """Base exception for utility operations."""
    pass


def setup_logger(name: str = "bitalloc.utils", level: int = logging.INFO) -> logging.Logger:
    """Configure and return a logger instance.

    Handlers are attached to the top-level ``bitalloc`` logger only, so child
    loggers propagate to a single stream.

    Args:
        name: Logger name
        level: Logging level

    Returns:
        logging.Logger: Configured logger instance
    """
    root = logging.getLogger("bitalloc")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.setLevel(level)
    return logging.getLogger(name)


def set_log_level(level: int) -> None:
    """Set the level of the whole ``bitalloc`` logger hierarchy."""
    setup_logger("bitalloc").setLevel(level)


def convert_ndarray(
    obj: Union[np.ndarray, np.generic, Dict, List, Any]
) -> Union[List, Dict, Any]:
    """Convert numpy arrays and scalars to plain Python objects recursively.

    Args:
        obj: Object to convert (numpy array, numpy scalar, dict, list, or other)

    Returns:
        Union[List, Dict, Any]: Converted object

    Raises:
        UtilsError: If conversion fails
    """
    try:
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.generic):
            return obj.item()
        elif isinstance(obj, dict):
            return {k: convert_ndarray(v) for k, v in obj.items()}
        elif isinstance(obj, (list, tuple)):
            return [convert_ndarray(i) for i in obj]
        return obj
    except Exception as e:
        setup_logger().error(f"Failed to convert numpy object: {e}")
        raise UtilsError(f"Array conversion failed: {e}")


def read_json(
    json_path: Union[str, Path],
    encoding: str = "utf-8"
) -> Any:
    """Read JSON file and return its contents.

    Args:
        json_path: Path to JSON file
        encoding: File encoding

    Returns:
        Parsed JSON data

    Raises:
        FileNotFoundError: If the file does not exist
        UtilsError: If file reading fails
    """
    logger = setup_logger()
    json_path = Path(json_path)

    if not json_path.is_file():
        raise FileNotFoundError(f"JSON file not found: {json_path}")

    try:
        with open(json_path, "r", encoding=encoding) as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in file {json_path}: {e}")
        raise UtilsError(f"Invalid JSON format: {e}")
    except Exception as e:
        logger.error(f"Failed to read JSON file {json_path}: {e}")
        raise UtilsError(f"JSON file reading failed: {e}")


def write_json(
    json_path: Union[str, Path],
    data: Any,
    encoding: str = "utf-8",
    indent: int = 2
) -> Path:
    """Write data to JSON file.

    Args:
        json_path: Path to write JSON file
        data: Data to write
        encoding: File encoding
        indent: JSON indentation level

    Returns:
        Path: Written file

    Raises:
        UtilsError: If file writing fails
    """
    logger = setup_logger()
    json_path = Path(json_path)

    try:
        json_path.parent.mkdir(parents=True, exist_ok=True)

        processed_data = convert_ndarray(data)
        with open(json_path, "w", encoding=encoding) as file:
            json.dump(processed_data, file, indent=indent)
            file.write("\n")
        logger.debug(f"Successfully wrote JSON file: {json_path}")
        return json_path
    except Exception as e:
        logger.error(f"Failed to write JSON file {json_path}: {e}")
        raise UtilsError(f"JSON file writing failed: {e}")


def parse_number_list(text: str, cast: type = float) -> List[Any]:
    """Parse a comma separated list such as ``"8,7,6"``.

    Args:
        text: Comma separated values
        cast: Type applied to every item

    Returns:
        List of parsed values, empty items skipped

    Raises:
        UtilsError: If an item cannot be cast
    """
    try:
        return [cast(item.strip()) for item in str(text).split(",") if item.strip()]
    except ValueError as e:
        raise UtilsError(f"Invalid number list '{text}': {e}")
