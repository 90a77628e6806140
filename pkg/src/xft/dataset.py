"""Instruction dataset ingestion: UTF-8 JSON lines, one pair per line."""

from __future__ import annotations

import json

from xft.train import InstructionExample


class DatasetError(Exception):
    pass


def load_instruction_dataset(path: str) -> list[InstructionExample]:
    """Parse {"instruction": ..., "output": ...} JSONL in stable order.

    Unknown fields are ignored; blank lines (including the trailing newline)
    are tolerated; anything else malformed is an error naming the line.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read dataset {path!r}: {e}") from e

    examples: list[InstructionExample] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise DatasetError(f"{path}:{lineno}: expected a JSON object")
        for field in ("instruction", "output"):
            if field not in obj:
                raise DatasetError(f"{path}:{lineno}: missing field {field!r}")
            if not isinstance(obj[field], str):
                raise DatasetError(f"{path}:{lineno}: field {field!r} must be a string")
        try:
            examples.append(InstructionExample(obj["instruction"], obj["output"]))
        except ValueError as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from e
    if not examples:
        raise DatasetError(f"{path}: dataset contains no examples")
    return examples


def save_instruction_dataset(examples, path: str) -> None:
    """Inverse of the loader; used to materialize synthetic corpora."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"instruction": ex.instruction, "output": ex.output}) + "\n")
