"""Client executor: connect, receive tasks, train, upload."""

from __future__ import annotations

import json
import logging
import os
import socket
import time
from pathlib import Path

from ..client import TaskSpec, execute_task
from ..compression import CODEC_IDS, decode
from ..errors import DecodeError, ProtocolError
from .protocol import UNASSIGNED_ID, Frame, MsgType, read_frame, write_frame

log = logging.getLogger("fsreal.net.client")


def _load_id(id_file: Path | None) -> int:
    if id_file is None or not id_file.exists():
        return UNASSIGNED_ID
    text = id_file.read_text().strip()
    return int(text) if text else UNASSIGNED_ID


def _store_id(id_file: Path | None, cid: int) -> None:
    if id_file is None:
        return
    tmp = id_file.with_name(id_file.name + ".tmp")
    tmp.write_text(f"{cid}\n")
    os.replace(tmp, id_file)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise ValueError(f"endpoint must look like HOST:PORT, got {text!r}")
    return host.strip("[]"), int(port)


def client_executor_loop(endpoint: tuple[str, int], id_file: str | Path | None = None, latency_s: float = 0.0,
                         max_attempts: int = 10, backoff_s: float = 0.1, max_backoff_s: float = 5.0) -> int:
    """Serve training tasks until the server says shutdown; returns the number of rounds trained.

    Reconnects with bounded exponential backoff, presenting the persisted id.
    Raises ConnectionError after ``max_attempts`` consecutive failed connects.
    """
    id_file = Path(id_file) if id_file is not None else None
    answered: set[int] = set()
    failures = 0
    while True:
        try:
            sock = socket.create_connection(endpoint, timeout=30)
        except OSError as exc:
            failures += 1
            if failures >= max_attempts:
                raise ConnectionError(f"cannot reach {endpoint[0]}:{endpoint[1]}: {exc}") from None
            time.sleep(min(max_backoff_s, backoff_s * 2 ** (failures - 1)))
            continue
        failures = 0
        try:
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if _session(sock, id_file, answered, latency_s):
                return len(answered)
        except (EOFError, OSError, ProtocolError) as exc:
            log.warning("connection lost: %s; reconnecting", exc)
        finally:
            sock.close()
        failures += 1
        if failures >= max_attempts:
            raise ConnectionError("server keeps dropping the connection")
        time.sleep(min(max_backoff_s, backoff_s * 2 ** (failures - 1)))


def _session(sock, id_file: Path | None, answered: set[int], latency_s: float) -> bool:
    """One connection's lifetime. True means the server ended the run."""
    write_frame(sock, Frame(MsgType.HELLO, 0, _load_id(id_file)))
    ack = read_frame(sock)
    if ack.msg_type == MsgType.SHUTDOWN:
        return True
    body = json.loads(ack.payload)
    if ack.msg_type != MsgType.ACK or "error" in body:
        raise ProtocolError(f"server refused the client: {body.get('error', ack.msg_type)}")
    cid = int(body["client_id"])
    _store_id(id_file, cid)
    spec = TaskSpec.from_dict(body["task"])
    shard = spec.shard()
    write_frame(sock, Frame(MsgType.ACK, 0, cid, 0, json.dumps({"n_samples": shard.n_samples}).encode()))
    log.info("registered as client %d", cid)
    while True:
        frame = read_frame(sock)
        if frame.msg_type == MsgType.SHUTDOWN:
            log.info("shutdown received after %d rounds", len(answered))
            return True
        if frame.msg_type != MsgType.TASK_BROADCAST:
            continue
        if frame.round in answered:
            log.debug("duplicate task for round %d ignored", frame.round)
            continue
        answered.add(frame.round)
        try:
            received = decode(frame.payload, spec.codec)
        except DecodeError as exc:
            log.warning("round %d task undecodable, skipped: %s", frame.round, exc)
            continue
        payload, _ = execute_task(spec, shard, received, frame.round)
        if latency_s > 0:
            time.sleep(latency_s)
        write_frame(sock, Frame(MsgType.MODEL_UPLOAD, frame.round, cid, CODEC_IDS[spec.codec], payload))
