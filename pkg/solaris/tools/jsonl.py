"""JSON-lines writer and reader used by every log surface."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, default=_to_builtin, separators=(",", ":"))


class JsonlWriter:
    """Append-only JSON-lines sink.

    Opened lazily so a writer that never receives a record leaves no file.
    """

    def __init__(self, path: Optional[PathLike]):
        self.path = Path(path) if path is not None else None
        self._handle = None
        self.count = 0

    def write(self, record: Dict[str, Any]) -> None:
        if self.path is None:
            return
        if self._handle is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("w", encoding="utf-8")
        self._handle.write(dumps(record))
        self._handle.write("\n")
        self.count += 1

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            logger.debug(f"Wrote {self.count} records to {self.path}")

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> int:
    """Write ``records`` to ``path``, replacing it. Returns the record count."""
    with JsonlWriter(path) as writer:
        for record in records:
            writer.write(record)
        count = writer.count
    if count == 0:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("", encoding="utf-8")
    return count


def read_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    """Yield one dict per non-blank line of ``path``."""
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)
