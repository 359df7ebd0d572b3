"""Logging helpers: stderr setup, per-stage log lines and JSON Lines side files."""

import json
import logging
import sys
import threading
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel


LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Union[str, int] = "INFO", quiet: bool = False) -> None:
    """Configure the root logger to write to stderr only.

    Args:
        level: Logging level name or number
        quiet: Only show warnings and errors
    """
    if quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level if isinstance(level, int) else level.upper(),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


class StageLogger:
    """Logger for pipeline stage invocations."""

    _logger = logging.getLogger("texforge.stage")

    @staticmethod
    def log(stage: str, input_data: Any, output: Any) -> None:
        """Log one stage run.

        Args:
            stage: Name of the stage
            input_data: Summary of the stage input
            output: Summary of the stage output
        """
        StageLogger._logger.info(f"Stage: {stage} | Input: {input_data} | Output: {output}")


class JsonlWriter:
    """Append-only JSON Lines writer, safe to share between threads."""

    def __init__(self, path: Optional[Union[str, Path]]):
        """Open the writer.

        Args:
            path: Output file; None discards everything written
        """
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._handle = None
        self.count = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("w", encoding="utf-8")

    def write(self, record: Union[BaseModel, dict]) -> None:
        payload = record.model_dump(mode="json") if isinstance(record, BaseModel) else record
        line = json.dumps(payload, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.count += 1
            if self._handle is not None:
                self._handle.write(line + "\n")

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()
