"""
Input Validation Utilities

Checks user-supplied entity names, hop counts, noise kinds and dataset
records before they reach the generator or the model.

Features:
- Entity name validation against the single-letter alphabet
- Hop count and noise kind checks used by the command-line flags
- JSONL record shape validation with non-fatal warnings
- Batch validation of whole dataset files, one result per line
- Format detection: JSONL record, rendered story text, or unknown
"""

import json
import re
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import ValidationError as PydanticValidationError

from core.graph import GraphConflictError, NodeLookupError, build_graph, path_relation
from core.relations import ENTITY_ALPHABET, UnknownEntityError, entity_index
from core.taskgen import MAX_HOPS, NoiseKind, StoryInstance


class StoryFormat(Enum):
    """Shapes a piece of user input can take."""
    JSONL_RECORD = "jsonl"
    RENDERED_TEXT = "text"
    UNKNOWN = "unknown"


class ValidationError(ValueError):
    """Raised when an input cannot be used at all."""
    pass


class ValidationResult:
    """Validation outcome with the normalized value and any warnings."""

    def __init__(self, value: Any, is_valid: bool, normalized: Any = None,
                 warnings: Optional[List[str]] = None, error: Optional[str] = None):
        self.value = value
        self.is_valid = is_valid
        self.normalized = normalized if normalized is not None else value
        self.warnings = warnings or []
        self.error = error

    def __bool__(self):
        return self.is_valid

    def raise_for_error(self) -> Any:
        """Return the normalized value, or raise ``ValidationError``."""
        if not self.is_valid:
            raise ValidationError(self.error or f"Invalid value: {self.value!r}")
        return self.normalized


def validate_entity_name(name: str) -> ValidationResult:
    """
    Validate an entity name: one uppercase letter A-Z.

    Args:
        name: The entity name to validate

    Returns:
        ValidationResult: normalized (stripped) name on success
    """
    if not name:
        return ValidationResult(name, False, error="Empty entity name")

    cleaned = name.strip()
    try:
        entity_index(cleaned)
    except UnknownEntityError:
        return ValidationResult(name, False, error=f"Entity names are single letters {ENTITY_ALPHABET[0]}-{ENTITY_ALPHABET[-1]}, got {name!r}")

    warnings = ["Surrounding whitespace removed"] if cleaned != name else []
    return ValidationResult(name, True, normalized=cleaned, warnings=warnings)


def validate_hop_count(k: Any) -> ValidationResult:
    """
    Validate a hop count: an integer in 1..10.

    Args:
        k: Hop count, as an int or a numeric string

    Returns:
        ValidationResult: normalized int on success
    """
    try:
        value = int(k)
    except (TypeError, ValueError):
        return ValidationResult(k, False, error=f"Hop count must be an integer, got {k!r}")
    if isinstance(k, float) and not k.is_integer():
        return ValidationResult(k, False, error=f"Hop count must be an integer, got {k!r}")
    if not 1 <= value <= MAX_HOPS:
        return ValidationResult(k, False, error=f"Hop count must be in 1..{MAX_HOPS}, got {value}")
    return ValidationResult(k, True, normalized=value)


def validate_noise_kind(noise: str) -> ValidationResult:
    """
    Validate a noise kind name (case-insensitive).

    Args:
        noise: One of none, disconnected, irrelevant, supporting

    Returns:
        ValidationResult: the ``NoiseKind`` member on success
    """
    if not noise:
        return ValidationResult(noise, False, error="Empty noise kind")
    try:
        kind = NoiseKind(noise.strip().lower())
    except ValueError:
        choices = ", ".join(k.value for k in NoiseKind)
        return ValidationResult(noise, False, error=f"Unknown noise kind {noise!r}; choose from {choices}")
    return ValidationResult(noise, True, normalized=kind)


def validate_story_record(record: Dict[str, Any]) -> ValidationResult:
    """
    Validate one dataset record against the story schema.

    Beyond the schema, warns (without failing) when the gold label disagrees
    with the offset oracle along the stated triples, or when a triple mentions
    an entity twice.

    Args:
        record: Parsed JSON object

    Returns:
        ValidationResult: the ``StoryInstance`` on success
    """
    if not isinstance(record, dict):
        return ValidationResult(record, False, error=f"Expected a JSON object, got {type(record).__name__}")

    try:
        instance = StoryInstance.model_validate(record)
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "record"
        return ValidationResult(record, False, error=f"{where}: {first.get('msg', 'invalid record')}")

    warnings = []
    for a, _, b in instance.triples:
        if a == b:
            warnings.append(f"Self relation on {a}")
    try:
        answer = path_relation(build_graph(instance.triples), *instance.question)
    except GraphConflictError as e:
        return ValidationResult(record, False, error=str(e))
    except NodeLookupError:
        return ValidationResult(record, False, error=f"Question {instance.question} mentions an entity absent from the triples")
    if answer is None:
        warnings.append(f"No path between {instance.question[0]} and {instance.question[1]}")
    elif answer is not instance.gold:
        warnings.append(f"Gold label {instance.gold.value} disagrees with the triples ({answer.value})")
    return ValidationResult(record, True, normalized=instance, warnings=warnings)


def batch_validate_records(lines: List[str]) -> List[Dict[str, Any]]:
    """
    Validate each line of a JSONL dataset.

    Args:
        lines: Raw text lines (blank lines are skipped)

    Returns:
        List[dict]: one entry per non-blank line with its 1-based line number
    """
    results = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            result = validate_story_record(json.loads(line))
            results.append({
                "line": line_number,
                "is_valid": result.is_valid,
                "warnings": result.warnings,
                "error": result.error,
            })
        except json.JSONDecodeError as e:
            results.append({
                "line": line_number,
                "is_valid": False,
                "warnings": [],
                "error": f"Invalid JSON: {e.msg}",
            })
    return results


_RENDERED_SENTENCE = re.compile(r"^[A-Z]\b.*[.?]$")


def detect_story_format(text: str) -> Optional[StoryFormat]:
    """
    Detect the likely format of a piece of input without full validation.

    Args:
        text: Raw input

    Returns:
        StoryFormat, or None for empty input
    """
    if not text or not text.strip():
        return None

    cleaned = text.strip()
    if cleaned.startswith("{"):
        try:
            payload = json.loads(cleaned.splitlines()[0])
        except json.JSONDecodeError:
            return StoryFormat.UNKNOWN
        if isinstance(payload, dict) and "triples" in payload:
            return StoryFormat.JSONL_RECORD
        return StoryFormat.UNKNOWN

    first_line = cleaned.splitlines()[0].strip()
    if _RENDERED_SENTENCE.match(first_line) or first_line.startswith("What is the relation"):
        return StoryFormat.RENDERED_TEXT
    return StoryFormat.UNKNOWN
