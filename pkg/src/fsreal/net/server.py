"""Socket server: the processor driven by real client processes over TCP.

Threads: one acceptor, one reader per connection, and the calling thread as
the single processor loop.  Readers only parse frames and post them to the
inbox queue; all server state is touched by the processor loop alone.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import socket
import threading
import time

from ..aggregation import UpdateRecord
from ..compression import CODEC_IDS, decode, encode
from ..data import generate_synthetic_federation
from ..errors import DecodeError, ProtocolError
from ..eventlog import EventLog, encode_payload
from ..model import Architecture, init_model
from ..rng import derive_seed
from ..server import Processor
from ..sim import RunEvaluator, SimConfig, SimResult, select_clients
from .protocol import SERVER_ID, UNASSIGNED_ID, Frame, MsgType, read_frame, write_frame

log = logging.getLogger("fsreal.net.server")


class _Conn:
    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.client_id: int | None = None

    def send(self, frame: Frame) -> int:
        return write_frame(self.sock, frame)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class NetServer:
    def __init__(self, cfg: SimConfig, host: str = "127.0.0.1", port: int = 0, wait_s: float = 120.0):
        cfg.validate()
        self.cfg = cfg
        self.wait_s = wait_s
        self.inbox: queue.Queue = queue.Queue()
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]
        self._claim_lock = threading.Lock()
        self._claimed: set[int] = set()
        self.conns: dict[int, _Conn] = {}
        self.n_samples: dict[int, int] = {}
        self.in_flight: dict[int, int] = {}
        self.timers: list[tuple[float, int, int]] = []
        self._timer_seq = 0
        self._alloc_calls = 0
        self._t0 = time.monotonic()
        self._closing = threading.Event()

        shards = generate_synthetic_federation(cfg.total_clients, cfg.n_classes, cfg.dim, cfg.samples_per_client,
                                               cfg.dirichlet_alpha, cfg.seed)
        self.evaluator = RunEvaluator(cfg, shards)
        self.init = init_model(Architecture(cfg.dim, cfg.hidden, cfg.n_classes), derive_seed(cfg.seed, "init"))
        self.log = EventLog(clock=self.now, keep_payloads=cfg.keep_payloads)
        self.processor = Processor(cfg.server_config(), self.init, self, self.log,
                                   known_clients=range(cfg.total_clients), on_aggregate=self._evaluate)

    # environment interface

    def now(self) -> float:
        return time.monotonic() - self._t0

    def _idle(self, exclude) -> list[int]:
        return sorted(c for c in self.conns if c not in self.in_flight and c not in exclude)

    def n_available(self, exclude) -> int:
        return len(self._idle(exclude))

    def allocate(self, round_index: int, count: int, exclude) -> list[int]:
        call = self._alloc_calls
        self._alloc_calls += 1
        picked = select_clients(self.cfg.seed, round_index, call, self._idle(exclude), count)
        for cid in picked:
            self.in_flight[cid] = round_index
        return picked

    def send_task(self, round_index: int, client_ids: list[int], payload: bytes) -> None:
        frame = Frame(MsgType.TASK_BROADCAST, round_index, SERVER_ID, CODEC_IDS[self.cfg.codec], payload)
        for cid in client_ids:
            try:
                self.conns[cid].send(frame)
            except OSError as exc:
                # the reader thread reports the disconnect; the task is lost with it
                log.warning("sending round %d to client %d failed: %s", round_index, cid, exc)

    def set_timer(self, round_index: int, deadline: float) -> None:
        heapq.heappush(self.timers, (deadline, self._timer_seq, round_index))
        self._timer_seq += 1

    def cancel_timers(self, round_index: int) -> None:
        self.timers = [t for t in self.timers if t[2] > round_index]
        heapq.heapify(self.timers)

    # threads

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                sock, addr = self.listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._reader, args=(_Conn(sock, addr),), daemon=True).start()

    def _claim(self, requested: int) -> int | None:
        with self._claim_lock:
            if requested == UNASSIGNED_ID:
                free = [c for c in range(self.cfg.total_clients) if c not in self._claimed]
                if not free:
                    return None
                requested = free[0]
            elif not 0 <= requested < self.cfg.total_clients or requested in self._claimed:
                return None
            self._claimed.add(requested)
            return requested

    def _release_claim(self, cid: int) -> None:
        with self._claim_lock:
            self._claimed.discard(cid)

    def _reader(self, conn: _Conn) -> None:
        try:
            hello = read_frame(conn.sock)
            if hello.msg_type != MsgType.HELLO:
                raise ProtocolError(f"expected hello, got message type {hello.msg_type}")
            cid = self._claim(hello.sender_id)
            if cid is None:
                conn.send(Frame(MsgType.ACK, 0, SERVER_ID, 0,
                                json.dumps({"error": "no client slot for this id"}).encode()))
                conn.close()
                return
            conn.client_id = cid
            spec = self.cfg.task_spec(cid)
            conn.send(Frame(MsgType.ACK, 0, SERVER_ID, 0,
                            json.dumps({"client_id": cid, "task": spec.to_dict()}).encode()))
            ready = read_frame(conn.sock)
            if ready.msg_type != MsgType.ACK or ready.sender_id != cid:
                raise ProtocolError("expected a ready ack carrying the assigned id")
            n_samples = int(json.loads(ready.payload)["n_samples"])
            self.inbox.put(("ready", cid, conn, n_samples))
            while True:
                frame = read_frame(conn.sock)
                if frame.msg_type == MsgType.MODEL_UPLOAD:
                    self.inbox.put(("upload", cid, conn, frame))
                else:
                    log.debug("client %d sent unexpected message type %d", cid, frame.msg_type)
        except EOFError:
            pass
        except (OSError, ValueError, KeyError, ProtocolError) as exc:
            if not self._closing.is_set():
                log.warning("connection %s: %s", conn.addr, exc)
        if conn.client_id is not None:
            self.inbox.put(("gone", conn.client_id, conn, None))
        else:
            conn.close()

    # processor loop

    def _evaluate(self, round_index, model) -> None:
        self.evaluator.record(round_index, self.now(), model, self.log)

    def _wait_for_clients(self) -> None:
        deadline = time.monotonic() + self.wait_s
        while len(self.conns) < self.cfg.total_clients:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TimeoutError(f"only {len(self.conns)} of {self.cfg.total_clients} clients connected")
            try:
                msg = self.inbox.get(timeout=left)
            except queue.Empty:
                continue
            self._dispatch(msg)
        log.info("all %d clients connected", self.cfg.total_clients)

    def _dispatch(self, msg) -> None:
        kind, cid, conn, data = msg
        if kind == "ready":
            self.conns[cid] = conn
            self.n_samples[cid] = data
        elif kind == "gone":
            if self.conns.get(cid) is conn:
                del self.conns[cid]
                self._release_claim(cid)
                conn.close()
                if cid in self.in_flight:
                    self.processor.on_drop(cid, self.in_flight.pop(cid))
        elif kind == "upload":
            self._upload(cid, data)

    def _upload(self, cid: int, frame: Frame) -> None:
        if frame.sender_id != cid:
            log.warning("upload on client %d's connection claims sender %d; ignored", cid, frame.sender_id)
            return
        if self.in_flight.get(cid) == frame.round:
            del self.in_flight[cid]
        try:
            params = decode(frame.payload, self.cfg.codec)
            update = UpdateRecord(cid, params, self.n_samples[cid], frame.round)
            status = self.processor.on_response(update, frame.payload, wire_bytes=frame.wire_size)
        except (DecodeError, ProtocolError, ValueError) as exc:
            log.warning("client %d round %d upload rejected: %s", cid, frame.round, exc)
            if self.processor.outstanding.get(cid) == frame.round:
                self.processor.on_drop(cid, frame.round)
            return
        log.debug("client %d round %d: %s", cid, frame.round, status)

    def _fire_due_timers(self) -> None:
        while self.timers and self.timers[0][0] <= self.now() and not self.processor.done:
            _, _, round_index = heapq.heappop(self.timers)
            count = self.processor.on_timeout(round_index)
            if count is not None:
                log.info("round %d timed out; rebroadcast to %d clients", round_index, count)

    def run(self) -> SimResult:
        acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        acceptor.start()
        try:
            self._wait_for_clients()
            self._t0 = time.monotonic()
            self.log.append("run_start", config=self.cfg.to_dict(), init=encode_payload(encode(self.init, "none")),
                            digest=self.init.digest(), devices=[], clock="wall")
            self.processor.start()
            while not self.processor.done:
                wait = max(0.0, self.timers[0][0] - self.now()) if self.timers else 1.0
                try:
                    self._dispatch(self.inbox.get(timeout=wait))
                except queue.Empty:
                    pass
                self._fire_due_timers()
                if not self.conns and not self.processor.done:
                    raise ConnectionError("every client disconnected")
            final = self.processor.global_params
            self.log.append("run_end", digest=final.digest(), rounds=self.processor.round_index)
        finally:
            self.close()
        report, evals = self.evaluator.finish(final, self.log)
        return SimResult(self.log, report, final, evals, self.evaluator.history)

    def close(self) -> None:
        self._closing.set()
        for conn in list(self.conns.values()):
            try:
                conn.send(Frame(MsgType.SHUTDOWN, self.processor.round_index, SERVER_ID))
            except OSError:
                pass
            conn.close()
        self.conns.clear()
        self.listener.close()
