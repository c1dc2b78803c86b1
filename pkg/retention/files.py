"""
File formats shared by the library: JSON documents, CSV tables, hex floats
and config-section checks. Every file is UTF-8 with LF line endings.
"""

import csv
import io
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, ParseError

logger = logging.getLogger(__name__)


def check_fields(data: Any, allowed: Sequence[str], prefix: str) -> dict[str, Any]:
    """
    Reject unknown keys in one config section.

    Args:
        data: Parsed JSON value of the section
        allowed: Field names the section accepts
        prefix: Dotted path of the section, used in error messages

    Returns:
        The section as a dict

    Raises:
        ConfigError: If the section is not an object or has unknown fields
    """
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown field")
    return data


def format_float(value: float) -> str:
    """Shortest-safe decimal text of a float (17 significant digits)."""
    return format(float(value), '.17g')


def floats_to_hex(values: Sequence[float] | np.ndarray) -> list[str]:
    return [float(v).hex() for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def hex_to_floats(values: Sequence[str], source: str = '<memory>', field: str | None = None) -> np.ndarray:
    try:
        return np.array([float.fromhex(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ParseError(source, f"bad hex float: {e}", field=field)


def save_to_json(data: Any, filename: str | Path) -> None:
    """
    Save data to JSON file with standardized formatting (UTF-8, LF, trailing newline).

    Args:
        data: JSON-serializable document
        filename: Path to save the JSON file
    """
    file_path = Path(filename)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(data, indent=2) + "\n", encoding='utf-8', newline='\n')
    logger.debug(f"Saved {file_path}")


def load_from_json(filename: str | Path) -> Any:
    """
    Load a JSON document with standardized error handling.

    Raises:
        FileNotFoundError: If the file does not exist
        ParseError: If the file is not valid JSON
    """
    file_path = Path(filename)
    try:
        return json.loads(file_path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise FileNotFoundError(f"File not found: {file_path}")
    except json.JSONDecodeError as e:
        raise ParseError(str(file_path), f"invalid JSON: {e.msg}", line=e.lineno)


def save_to_csv(filename: str | Path, headers: list[str], data: list[list[Any]]) -> None:
    """
    Save rows to a CSV file (UTF-8, LF line endings).

    Floats are written with 17 significant digits; other values via str().
    """
    file_path = Path(filename)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(headers)
    for row in data:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    file_path.write_text(buffer.getvalue(), encoding='utf-8', newline='\n')
    logger.debug(f"Saved {len(data)} rows to {file_path}")


def read_csv(filename: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV file into (header, rows of strings)."""
    file_path = Path(filename)
    with open(file_path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        try:
            headers = next(reader)
        except StopIteration:
            raise ParseError(str(file_path), "empty file", line=1)
        return headers, list(reader)
