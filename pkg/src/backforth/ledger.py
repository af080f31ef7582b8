"""Append-only JSONL checkpoint ledger with last-entry-wins replay.

The first line is a header carrying the config hash; every later line is a
:class:`LedgerEntry`. A torn trailing line (process killed mid-write) is
ignored on replay. One process at a time may hold a ledger, enforced by an
``fcntl`` lock on ``<ledger>.lock`` that the kernel drops if the holder dies.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from backforth.stages import CandidatePair, Status

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class LedgerError(Exception):
    pass


class LedgerLocked(LedgerError):
    pass


class ConfigMismatch(LedgerError):
    pass


@dataclass(frozen=True)
class LedgerEntry:
    doc_id: str
    status: Status
    payload: CandidatePair
    updated_at: str
    attempt_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "doc_id": self.doc_id,
                "status": self.status.value,
                "payload": self.payload.to_dict(),
                "updated_at": self.updated_at,
                "attempt_count": self.attempt_count,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, d: dict) -> LedgerEntry:
        return cls(d["doc_id"], Status(d["status"]), CandidatePair.from_dict(d["payload"]), d["updated_at"], d["attempt_count"])


def replay(path: str | Path) -> tuple[dict | None, dict[str, LedgerEntry]]:
    """Rebuild ``(header, live entries by doc_id)`` from a ledger file."""
    path = Path(path)
    header = None
    live: dict[str, LedgerEntry] = {}
    if not path.exists():
        return header, live
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except ValueError:
            # only whole lines are ever written, so this is a torn write from a crash
            logger.warning("%s:%d: ignoring torn ledger line", path, lineno)
            continue
        if "_header" in d:
            header = d["_header"]
            continue
        entry = LedgerEntry.from_json(d)
        live[entry.doc_id] = entry
    return header, live


class Ledger:
    """Handle on an open ledger. Use as a context manager."""

    def __init__(self, path: str | Path, config_hash: str, force: bool = False):
        self.path = Path(path)
        self.config_hash = config_hash
        self.force = force
        self._lock_fh = None
        self._fh = None
        self.entries: dict[str, LedgerEntry] = {}

    def open(self) -> Ledger:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(self.path.with_name(self.path.name + ".lock"), "a+")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            self._lock_fh = None
            raise LedgerLocked(f"run already in progress: {self.path} is locked by another process") from None
        try:
            header, self.entries = replay(self.path)
            if header is not None and header.get("config_hash") != self.config_hash and not self.force:
                raise ConfigMismatch(
                    f"{self.path} was written with a different configuration; pass --force to resume it anyway"
                )
            self._fh = open(self.path, "a", encoding="utf-8")
            self._repair_tail()
            if header is None or header.get("config_hash") != self.config_hash:
                self._write_line(json.dumps({"_header": {"config_hash": self.config_hash, "version": FORMAT_VERSION}}))
                self.sync()
        except BaseException:
            self.close()
            raise
        return self

    def _repair_tail(self) -> None:
        # a torn last line must not swallow the next append
        size = self.path.stat().st_size
        if size:
            with open(self.path, "rb") as fh:
                fh.seek(size - 1)
                if fh.read(1) != b"\n":
                    self._fh.write("\n")

    def _write_line(self, line: str) -> None:
        self._fh.write(line + "\n")

    def __enter__(self) -> Ledger:
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._fh is not None:
            self.sync()
            self._fh.close()
            self._fh = None
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def append(self, pair: CandidatePair, attempted: bool = True) -> LedgerEntry:
        prev = self.entries.get(pair.doc_id)
        attempts = (prev.attempt_count if prev else 0) + (1 if attempted else 0)
        entry = LedgerEntry(
            pair.doc_id,
            pair.status,
            pair,
            datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            attempts,
        )
        self._write_line(entry.to_json())
        self.entries[pair.doc_id] = entry
        return entry

    def extend(self, pairs: Iterable[CandidatePair], attempted: bool = True) -> None:
        for pair in pairs:
            self.append(pair, attempted)
        self.sync()

    def sync(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def pairs(self) -> list[CandidatePair]:
        """Live pairs in ascending doc_id order."""
        return [self.entries[k].payload for k in sorted(self.entries)]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LedgerEntry]:
        return iter(self.entries[k] for k in sorted(self.entries))
