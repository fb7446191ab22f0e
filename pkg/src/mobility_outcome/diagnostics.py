"""Exclusion bookkeeping shared by the pipeline stages."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Exclusion:
    stage: str
    kind: str  # "user" or "interval"
    user_id: str
    key: str
    reason: str


@dataclass
class ExclusionLog:
    """Append-only list of exclusions; one entry per excluded unit."""

    entries: list[Exclusion] = field(default_factory=list)

    def add(self, stage: str, kind: str, user_id: str, reason: str, key: str = "") -> None:
        entry = Exclusion(stage, kind, user_id, key, reason)
        self.entries.append(entry)
        logger.info("exclude %s %s %s %s: %s", stage, kind, user_id, key, reason)

    def users(self, reason: str | None = None) -> list[str]:
        return [e.user_id for e in self.entries
                if e.kind == "user" and (reason is None or e.reason == reason)]

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "kind", "user_id", "key", "reason"])
            for e in self.entries:
                writer.writerow([e.stage, e.kind, e.user_id, e.key, e.reason])
