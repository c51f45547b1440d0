"""Totally ordered run log, serialised as JSON lines."""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path
from typing import Callable, Iterable

# events written by the server processor; everything else is environment bookkeeping
PROCESSOR_EVENTS = frozenset({"select", "broadcast", "response", "timeout", "aggregate", "drop"})


class EventLog:
    def __init__(self, clock: Callable[[], float] | None = None, keep_payloads: bool = True):
        self.events: list[dict] = []
        self.clock = clock or (lambda: 0.0)
        self.keep_payloads = keep_payloads

    def append(self, type: str, **fields) -> dict:
        event = {"seq": len(self.events), "ts": float(self.clock()), "type": type}
        event.update(fields)
        self.events.append(event)
        return event

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of_type(self, *types: str) -> list[dict]:
        return [e for e in self.events if e["type"] in types]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def read_events(path: str | Path) -> list[dict]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not a JSON object: {exc.msg}") from None
    return events


def encode_payload(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def decode_payload(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def strip_for_compare(events: Iterable[dict]) -> list[dict]:
    """Processor events without the sequence numbers, which include env events."""
    return [{k: v for k, v in e.items() if k != "seq"} for e in events if e["type"] in PROCESSOR_EVENTS]
