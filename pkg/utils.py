"""
Helpers for the command-line scripts: logging setup, seed lists, durations
and the Excel summary.
"""

import logging
from pathlib import Path
from typing import Any

import numpy as np
from openpyxl import Workbook
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.table import Table

from retention.errors import ConfigError

logger = logging.getLogger(__name__)


def setup_logging(level: str = "INFO") -> None:
    """
    Configure logging for the application.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    """
    log_level = getattr(logging, level.upper(), logging.INFO)

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        force=True
    )

    # Set specific logger levels for noisy libraries
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('numexpr').setLevel(logging.WARNING)


def format_duration(seconds: int) -> str:
    """Format duration in seconds to human readable format."""
    minutes = seconds // 60
    remaining_seconds = seconds % 60
    return f"{minutes}m {remaining_seconds}s"


def parse_seeds(seeds: str) -> list[int]:
    """
    Parse a comma-separated seed list, handling file input if prefixed with @.

    With @path the file holds one seed per line (blank lines ignored).

    Args:
        seeds: String such as "0,1,2" or "@seeds.txt"

    Returns:
        list[int]: Seeds in the given order

    Raises:
        ConfigError: If the file is missing or empty or a seed is not an integer
    """
    if seeds.startswith('@'):
        file_path_str = seeds[1:].strip()
        if not file_path_str:
            raise ConfigError('seeds', "no file path specified after @")
        file_path = Path(file_path_str).expanduser()
        if not file_path.exists():
            raise ConfigError('seeds', f"file not found: {file_path}")
        tokens = [line.strip() for line in file_path.read_text().splitlines() if line.strip()]
        logger.info(f"Loaded {len(tokens)} seed(s) from {file_path}")
    else:
        tokens = [token.strip() for token in seeds.split(',') if token.strip()]
    if not tokens:
        raise ConfigError('seeds', "seed list is empty")
    try:
        values = [int(token) for token in tokens]
    except ValueError as e:
        raise ConfigError('seeds', f"not an integer list: {e}")
    for value in values:
        if not 0 <= value < 2**64:
            raise ConfigError('seeds', f"seed {value} is not a 64-bit unsigned integer")
    return values


def save_to_excel(filename: str | Path, title: str, headers: list[str], data: list[list[Any]]) -> None:
    """
    Save data to Excel file with filtering and sorting capabilities.

    Args:
        filename: Full path to the Excel file to create
        title: Worksheet title
        headers: Column headers
        data: Data rows (each row is a list of values)
    """
    if not data:
        logger.warning(f"No data to export to {filename}")
        return

    file_path = Path(filename)
    file_path.parent.mkdir(parents=True, exist_ok=True)

    wb = Workbook()
    ws = wb.active
    ws.title = title

    ws.append(headers)
    for row in data:
        ws.append([float(v) if isinstance(v, np.floating) else v for v in row])

    # Create table for filtering and sorting
    table_range = f"A1:{get_column_letter(len(headers))}{len(data) + 1}"
    table_name = title.replace(' ', '').replace('-', '') + "Table"
    ws.add_table(Table(displayName=table_name, ref=table_range))

    # Auto-adjust column widths
    for column in ws.columns:
        max_length = max(len(str(cell.value)) for cell in column if cell.value is not None)
        ws.column_dimensions[column[0].column_letter].width = min(max_length + 2, 80)

    wb.save(str(file_path))
    logger.info(f"Saved {len(data)} rows to {filename}")
