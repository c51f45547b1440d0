"""Re-execute a recorded event log through the server processor and check it reproduces."""

from __future__ import annotations

import json
from pathlib import Path

from .aggregation import UpdateRecord
from .compression import decode
from .errors import DecodeError, FSRealError, VerificationError
from .eventlog import EventLog, decode_payload, read_events, sha256, strip_for_compare
from .server import Processor


class ReplayEnv:
    """Environment that answers availability and selection queries from the recorded log."""

    def __init__(self, selects: list[dict]):
        self._selects = selects
        self._next = 0
        self._current: dict | None = None
        self.time = 0.0

    def now(self) -> float:
        return self.time

    def n_available(self, exclude) -> int:
        if self._next >= len(self._selects):
            raise VerificationError("processor asked for more selections than the log records")
        self._current = self._selects[self._next]
        self._next += 1
        return int(self._current["n_ava"])

    def allocate(self, round_index: int, count: int, exclude) -> list[int]:
        sel = self._current
        if sel is None or sel["round"] != round_index or sel["count"] != count:
            raise VerificationError(f"selection diverged in round {round_index}: processor wants {count} clients, "
                                    f"log has {sel and sel['count']} for round {sel and sel['round']}")
        clients = [int(c) for c in sel["clients"]]
        if set(clients) & set(exclude):
            raise VerificationError(f"round {round_index}: logged selection reuses busy clients")
        return clients

    def send_task(self, round_index, client_ids, payload) -> None:
        pass

    def set_timer(self, round_index, deadline) -> None:
        pass

    def cancel_timers(self, round_index) -> None:
        pass


def _normalise(events):
    return json.loads(json.dumps(events))


def _find(events, type_):
    found = [e for e in events if e.get("type") == type_]
    if len(found) != 1:
        raise VerificationError(f"expected exactly one {type_!r} event, found {len(found)}")
    return found[0]


def replay_events(events: list[dict]) -> str:
    """Verify ``events``; returns the reproduced final digest or raises VerificationError."""
    from .sim import SimConfig  # local: sim imports most of the package

    start = _find(events, "run_start")
    end = _find(events, "run_end")
    cfg = SimConfig.from_dict(start["config"])
    try:
        init = decode(decode_payload(start["init"]), "none")
    except (DecodeError, ValueError) as exc:
        raise VerificationError(f"initial model unreadable: {exc}") from None
    if init.digest() != start["digest"]:
        raise VerificationError("initial model does not match its recorded digest")

    env = ReplayEnv([e for e in events if e.get("type") == "select"])
    log = EventLog(clock=env.now, keep_payloads=cfg.keep_payloads)
    proc = Processor(cfg.server_config(), init, env, log, known_clients=range(cfg.total_clients))
    proc.start()
    for e in events:
        kind = e.get("type")
        if kind not in ("response", "timeout", "drop") or proc.done:
            continue
        env.time = float(e["ts"])
        if kind == "timeout":
            proc.on_timeout(int(e["round"]))
            continue
        if kind == "drop":
            proc.on_drop(int(e["client_id"]), int(e["round"]))
            continue
        if "payload" not in e:
            raise VerificationError("log was written without payloads and cannot be replayed")
        try:
            payload = decode_payload(e["payload"])
        except ValueError as exc:
            raise VerificationError(f"event {e.get('seq')}: payload is not valid base64: {exc}") from None
        if sha256(payload) != e["sha256"]:
            raise VerificationError(f"event {e.get('seq')}: payload from client {e['client_id']} "
                                    f"round {e['round']} fails its checksum")
        try:
            params = decode(payload, cfg.codec)
        except DecodeError as exc:
            raise VerificationError(f"event {e.get('seq')}: payload does not decode: {exc}") from None
        update = UpdateRecord(int(e["client_id"]), params, int(e["n_samples"]), int(e["round"]),
                              frozenset(e["mask"]))
        proc.on_response(update, payload, wire_bytes=int(e["bytes"]))

    recorded = strip_for_compare(events)
    replayed = _normalise(strip_for_compare(log.events))
    if start.get("clock") == "wall":
        # real-time runs: event times are observations, not something the processor derives
        recorded, replayed = _drop_times(recorded), _drop_times(replayed)
    for i, (a, b) in enumerate(zip(recorded, replayed)):
        if a != b:
            raise VerificationError(f"processor event {i} differs: recorded {_brief(a)}, replayed {_brief(b)}")
    if len(recorded) != len(replayed):
        raise VerificationError(f"log has {len(recorded)} processor events, replay produced {len(replayed)}")
    digest = proc.global_params.digest()
    if digest != end["digest"]:
        raise VerificationError(f"final model digest {digest} does not match recorded {end['digest']}")
    return digest


def _drop_times(events):
    return [{k: v for k, v in e.items() if k not in ("ts", "deadline")} for e in events]


def _brief(event: dict) -> str:
    shown = {k: v for k, v in event.items() if k != "payload"}
    text = json.dumps(shown)
    return text if len(text) < 300 else text[:297] + "..."


def verify_log(path: str | Path) -> str:
    try:
        events = read_events(path)
    except ValueError as exc:
        raise VerificationError(str(exc)) from None
    try:
        return replay_events(events)
    except VerificationError:
        raise
    except (FSRealError, KeyError, TypeError, ValueError) as exc:
        raise VerificationError(f"log does not replay: {type(exc).__name__}: {exc}") from None
