"""Append-only provenance ledger.

One record per line: space-separated ``key=value`` pairs (values
percent-encoded) followed by `` fnv=<16 hex digits>``, the 64-bit FNV-1a
hash of everything before that suffix.
"""

from __future__ import annotations

import datetime as _dt
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from urllib.parse import quote, unquote

from .errors import IntegrityError, ValidationError
from .parameter_store import atomic_write_bytes, fnv1a64

ACTIONS = ("merge", "integrate", "unmerge", "reweight", "reorthogonalize", "reject", "purge")
FIELDS = ("seq", "action", "model_id", "alpha", "delta_hash", "timestamp", "operator")


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def encode_record(pairs: Iterable[tuple[str, str]]) -> str:
    body = " ".join(f"{k}={quote(v, safe=':')}" for k, v in pairs)
    return f"{body} fnv={fnv1a64(body.encode('utf-8')):016x}"


def decode_record(line: str, lineno: int | None = None) -> dict[str, str]:
    where = f"line {lineno}: " if lineno is not None else ""
    line = line.rstrip("\n")
    body, sep, digest = line.rpartition(" fnv=")
    if not sep:
        raise IntegrityError(f"{where}missing integrity suffix")
    try:
        expected = int(digest, 16)
    except ValueError:
        raise IntegrityError(f"{where}malformed integrity suffix") from None
    if fnv1a64(body.encode("utf-8")) != expected:
        raise IntegrityError(f"{where}integrity check failed (record was modified)")
    out = {}
    for token in body.split(" "):
        key, eq, value = token.partition("=")
        if not eq:
            raise IntegrityError(f"{where}malformed token {token!r}")
        out[key] = unquote(value)
    return out


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    action: str
    model_id: str | None = None
    alpha: float | None = None
    delta_hash: str | None = None
    timestamp: str = ""
    operator: str = ""

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValidationError(f"unknown ledger action {self.action!r}")

    def to_line(self) -> str:
        return encode_record(
            [
                ("seq", str(self.seq)),
                ("action", self.action),
                ("model_id", self.model_id or ""),
                ("alpha", "" if self.alpha is None else repr(float(self.alpha))),
                ("delta_hash", self.delta_hash or ""),
                ("timestamp", self.timestamp),
                ("operator", self.operator),
            ]
        )

    @classmethod
    def from_line(cls, line: str, lineno: int | None = None) -> "LedgerEntry":
        rec = decode_record(line, lineno)
        missing = [f for f in FIELDS if f not in rec]
        if missing:
            raise IntegrityError(f"ledger record lacks fields {missing}")
        return cls(
            seq=int(rec["seq"]),
            action=rec["action"],
            model_id=rec["model_id"] or None,
            alpha=float(rec["alpha"]) if rec["alpha"] else None,
            delta_hash=rec["delta_hash"] or None,
            timestamp=rec["timestamp"],
            operator=rec["operator"],
        )


def check_sequence(entries: Iterable[LedgerEntry]) -> None:
    last = 0
    for e in entries:
        if e.seq <= last:
            raise IntegrityError(f"ledger seq {e.seq} does not increase (previous {last})")
        last = e.seq


def ledger_text(entries: Iterable[LedgerEntry]) -> str:
    return "".join(e.to_line() + "\n" for e in entries)


def write_ledger(entries: Iterable[LedgerEntry], path) -> None:
    atomic_write_bytes(path, ledger_text(entries).encode("utf-8"))


def append_ledger(entries: Iterable[LedgerEntry], path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_line() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_ledger(path) -> list[LedgerEntry]:
    text = Path(path).read_text(encoding="utf-8")
    entries = [LedgerEntry.from_line(line, i) for i, line in enumerate(text.splitlines(), 1) if line]
    check_sequence(entries)
    return entries
