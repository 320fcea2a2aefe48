"""
Dataset and Result File I/O

JSONL datasets, CSV reports, JSON checkpoints and YAML config sections.
Every writer goes through a temporary file in the target directory followed
by ``os.replace``, so readers never observe a half-written file.
"""

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import yaml
from pydantic import ValidationError as PydanticValidationError

from core.taskgen import StoryInstance

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """Raised for a malformed dataset line; carries the 1-based line number."""

    def __init__(self, message: str, path: PathLike, line_number: int):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = str(path)
        self.line_number = line_number


def atomic_write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_jsonl(path: PathLike) -> List[StoryInstance]:
    """
    Load story instances, one JSON object per line (blank lines skipped).

    Raises:
        DatasetError: invalid JSON or record shape, with the line number
        FileNotFoundError: missing file
    """
    instances: List[StoryInstance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                instances.append(StoryInstance.model_validate_json(line))
            except PydanticValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(p) for p in first.get("loc", ())) or "record"
                raise DatasetError(f"{where}: {first.get('msg', 'invalid record')}", path, line_number) from None
    logger.info(f"Loaded {len(instances)} instances from {path}")
    return instances


def write_jsonl(path: PathLike, instances: Iterable[StoryInstance], append: bool = False) -> int:
    """Write (or append) instances; returns the number of lines written."""
    lines = [inst.to_json() for inst in instances]
    text = "".join(f"{line}\n" for line in lines)
    if append and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read() + text
    atomic_write_text(path, text)
    return len(lines)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buffer.getvalue())


def write_json(path: PathLike, payload: Union[str, Dict[str, Any]]) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=False)
    atomic_write_text(path, text if text.endswith("\n") else text + "\n")


def load_yaml_section(path: PathLike, section: str) -> Dict[str, Any]:
    """
    One top-level section of a YAML config, or ``{}`` when the file or the
    section is missing.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        logger.warning(f"Config file {path} not found, using defaults")
        return {}
    except yaml.YAMLError as e:
        logger.warning(f"Could not parse {path}: {e}; using defaults")
        return {}
    value = config.get(section) or {}
    if not isinstance(value, dict):
        logger.warning(f"Config section {section!r} in {path} is not a mapping, using defaults")
        return {}
    return value
