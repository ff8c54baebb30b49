"""Append-only audit trail, persisted as newline-delimited JSON."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class AuditLog:
    def __init__(self) -> None:
        self.entries: list[dict[str, Any]] = []

    def add(self, event: str, **fields: Any) -> None:
        entry = {"event": event, **fields}
        self.entries.append(entry)
        logger.info("audit %s", json.dumps(entry, sort_keys=True, default=str))

    def extend(self, other: "AuditLog") -> None:
        self.entries.extend(other.entries)

    def events(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.entries if e["event"] == event]

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, sort_keys=True, default=str) + "\n")


def read_audit(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
