"""FL server state machine: selection, AIMD timeout, sync goal counting, buffered async.

The :class:`Processor` is the single logical consumer of server events.  It
is a deterministic function of the event sequence it is fed; everything
random or time-dependent (which clients are idle, which of them get picked,
the clock) is supplied by an environment object with this interface::

    now() -> float
    n_available(exclude: set[int]) -> int
    allocate(round_index: int, count: int, exclude: set[int]) -> list[int]
    send_task(round_index: int, client_ids: list[int], payload: bytes) -> None
    set_timer(round_index: int, deadline: float) -> None
    cancel_timers(round_index: int) -> None

The simulator, the socket server, and the replay verifier each provide one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .aggregation import UpdateRecord, fedavg_aggregate, fedbuff_aggregate
from .compression import CODEC_IDS, encode
from .errors import ConfigError, ProtocolError
from .eventlog import EventLog, encode_payload, sha256
from .model import ModelParams, make_upload_mask
from .net.protocol import HEADER_SIZE

MODES = ("sync", "async")


@dataclass
class ServerConfig:
    n_participants: int
    response_goal: int | None = None
    over_selection_q: float = 1.5
    timeout_t0_s: float = 60.0
    timeout_delta_s: float = 5.0
    timeout_k: int = 3
    timeout_floor_s: float = 1.0
    mode: str = "sync"
    async_goal_K: int | None = None
    max_rounds: int = 200
    staleness_max: int = 50
    server_lr: float = 1.0
    codec: str = "none"
    algorithm: str = "fedavg"
    total_clients: int | None = None
    max_timeouts_per_round: int = 40
    async_concurrency: int | None = None

    def __post_init__(self):
        n = self.n_participants
        if n < 1:
            raise ConfigError(f"n_participants must be >= 1, got {n}")
        if self.response_goal is None:
            self.response_goal = n
        if self.async_goal_K is None:
            self.async_goal_K = max(1, round(0.1 * n))
        if self.async_concurrency is None:
            # the same over-selected broadcast budget a sync round gets
            self.async_concurrency = math.floor(Fraction(repr(float(self.over_selection_q))) * n)
            if self.total_clients is not None:
                self.async_concurrency = min(self.async_concurrency, self.total_clients)
        if self.async_concurrency < 1 or (self.total_clients is not None
                                          and self.async_concurrency > self.total_clients):
            raise ConfigError(f"async_concurrency must be in [1, total_clients], got {self.async_concurrency}")
        if not 1 <= self.response_goal <= n:
            raise ConfigError(f"response_goal must be in [1, n_participants={n}], got {self.response_goal}")
        if self.total_clients is not None and n > self.total_clients:
            raise ConfigError(f"n_participants={n} exceeds total_clients={self.total_clients}")
        if not self.over_selection_q >= 1:
            raise ConfigError(f"over_selection_q must be >= 1, got {self.over_selection_q}")
        if not self.timeout_t0_s > 0:
            raise ConfigError(f"timeout_t0_s must be > 0, got {self.timeout_t0_s}")
        if not self.timeout_delta_s >= 0:
            raise ConfigError(f"timeout_delta_s must be >= 0, got {self.timeout_delta_s}")
        if self.timeout_k < 1:
            raise ConfigError(f"timeout_k must be >= 1, got {self.timeout_k}")
        if not self.timeout_floor_s > 0:
            raise ConfigError(f"timeout_floor_s must be > 0, got {self.timeout_floor_s}")
        if self.timeout_t0_s < self.timeout_floor_s:
            raise ConfigError("timeout_t0_s must not be below timeout_floor_s")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.async_goal_K < 1:
            raise ConfigError(f"async_goal_K must be >= 1, got {self.async_goal_K}")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be >= 1, got {self.max_rounds}")
        if self.staleness_max < 0:
            raise ConfigError(f"staleness_max must be >= 0, got {self.staleness_max}")
        if not self.server_lr > 0:
            raise ConfigError(f"server_lr must be > 0, got {self.server_lr}")
        if self.codec not in CODEC_IDS:
            raise ConfigError(f"codec must be one of {sorted(CODEC_IDS)}, got {self.codec!r}")
        make_upload_mask(self.algorithm)
        if select_broadcast_count(n, self.over_selection_q, n) < self.response_goal:
            raise ConfigError("over_selection_q * n_participants must be >= response_goal")


# -- selection and AIMD rules ---------------------------------------------------

def select_broadcast_count(n: int, q: float, n_ava: int) -> int:
    """min(n_ava, floor(q * n)), with q read as its decimal value."""
    return max(0, min(n_ava, math.floor(Fraction(repr(float(q))) * n)))


def rebroadcast_count(n: int, n_ava_now: int) -> int:
    return min(n, max(n_ava_now - n, 0))


@dataclass
class TimeoutController:
    current_t0_s: float
    consecutive_clean_rounds: int = 0


@dataclass
class RoundState:
    round_index: int
    broadcast_set: set = field(default_factory=set)
    responded: list = field(default_factory=list)
    responded_ids: set = field(default_factory=set)
    rebroadcasts_this_round: int = 0
    deadline: float = math.inf
    aggregated: bool = False


def on_timeout(state: RoundState, controller: TimeoutController, n: int, n_ava_now: int, now: float) -> int:
    """Deadline missed: rebroadcast count, timer reset with the current budget, budget doubled."""
    count = rebroadcast_count(n, n_ava_now)
    state.deadline = now + controller.current_t0_s
    state.rebroadcasts_this_round += 1
    controller.current_t0_s *= 2.0
    controller.consecutive_clean_rounds = 0
    return count


def on_round_complete(controller: TimeoutController, had_rebroadcast: bool, k: int, delta_s: float,
                      floor_s: float) -> TimeoutController:
    if had_rebroadcast:
        controller.consecutive_clean_rounds = 0
        return controller
    controller.consecutive_clean_rounds += 1
    if controller.consecutive_clean_rounds >= k:
        controller.current_t0_s = max(floor_s, controller.current_t0_s - delta_s)
        controller.consecutive_clean_rounds = 0
    return controller


def handle_response_sync(state: RoundState, update: UpdateRecord, known_clients=None) -> str:
    """Returns ``accepted``, ``duplicate`` or ``late``."""
    if known_clients is not None and update.client_id not in known_clients:
        raise ProtocolError(f"unknown client id {update.client_id}")
    if update.origin_round > state.round_index:
        raise ProtocolError(
            f"client {update.client_id} answered round {update.origin_round} ahead of round {state.round_index}"
        )
    if update.origin_round < state.round_index or state.aggregated:
        return "late"
    if update.client_id not in state.broadcast_set:
        raise ProtocolError(f"client {update.client_id} was not broadcast in round {state.round_index}")
    if update.client_id in state.responded_ids:
        return "duplicate"
    state.responded_ids.add(update.client_id)
    state.responded.append(update)
    return "accepted"


def handle_response_async(buffer: list, update: UpdateRecord, K: int, staleness_max: int, current_round: int,
                          global_params: ModelParams, server_lr: float = 1.0):
    """Returns ``(status, new_global)``; ``new_global`` is None unless status is ``aggregated``."""
    tau = current_round - update.origin_round
    if tau < 0:
        raise ProtocolError(f"client {update.client_id} update from future round {update.origin_round}")
    if tau > staleness_max:
        return "discarded_stale", None
    buffer.append(update)
    if len(buffer) < K:
        return "buffered", None
    new_global = fedbuff_aggregate(global_params, buffer, server_lr, current_round)
    buffer.clear()
    return "aggregated", new_global


# -- processor ------------------------------------------------------------------

class RoundStalled(RuntimeError):
    pass


class Processor:
    def __init__(self, cfg: ServerConfig, global_params: ModelParams, env, log: EventLog,
                 known_clients=None, on_aggregate: Callable[[int, ModelParams], None] | None = None):
        self.cfg = cfg
        self.global_params = global_params
        self.env = env
        self.log = log
        self.known_clients = set(known_clients) if known_clients is not None else None
        self.on_aggregate = on_aggregate
        self.controller = TimeoutController(cfg.timeout_t0_s)
        self.round_index = 0
        self.state: RoundState | None = None
        self.buffer: list[UpdateRecord] = []
        self.outstanding: dict[int, int] = {}
        self.done = False
        self._payload_cache: tuple[int, bytes] | None = None
        self._members: tuple[list, list] = ([], [])
        self._model_version = 0
        self._last_answer: dict[int, int] = {}

    # broadcasting

    def _task_payload(self) -> bytes:
        if self._payload_cache is None or self._payload_cache[0] != self._model_version:
            self._payload_cache = (self._model_version, encode(self.global_params, self.cfg.codec))
        return self._payload_cache[1]

    def _broadcast(self, count: int, exclude: set, n_ava: int, rebroadcast: bool) -> list[int]:
        ids = list(self.env.allocate(self.round_index, count, exclude)) if count > 0 else []
        if len(ids) != count:
            raise ProtocolError(f"environment allocated {len(ids)} clients, {count} requested")
        self.log.append("select", round=self.round_index, n_ava=n_ava, count=count,
                        clients=ids, rebroadcast=rebroadcast)
        if not ids:
            return ids
        payload = self._task_payload()
        self.env.send_task(self.round_index, ids, payload)
        for cid in ids:
            self.outstanding[cid] = self.round_index
            self.log.append("broadcast", round=self.round_index, client_id=cid,
                            bytes=HEADER_SIZE + len(payload), rebroadcast=rebroadcast)
        return ids

    def start(self) -> None:
        if self.cfg.mode == "sync":
            self._begin_round()
        else:
            n_ava = self.env.n_available(set())
            self._broadcast(min(n_ava, self.cfg.async_concurrency), set(), n_ava, rebroadcast=False)
            if not self.outstanding:
                raise RoundStalled("no clients available to start asynchronous training")

    def _begin_round(self) -> None:
        if self.round_index >= self.cfg.max_rounds:
            self.done = True
            return
        self.state = RoundState(self.round_index)
        n_ava = self.env.n_available(set())
        count = select_broadcast_count(self.cfg.n_participants, self.cfg.over_selection_q, n_ava)
        ids = self._broadcast(count, set(), n_ava, rebroadcast=False)
        self.state.broadcast_set.update(ids)
        self.state.deadline = self.env.now() + self.controller.current_t0_s
        self.env.set_timer(self.round_index, self.state.deadline)

    # inbound

    def on_response(self, update: UpdateRecord, payload: bytes, wire_bytes: int | None = None) -> str:
        if self.known_clients is not None and update.client_id not in self.known_clients:
            raise ProtocolError(f"unknown client id {update.client_id}")
        if wire_bytes is None:
            wire_bytes = HEADER_SIZE + len(payload)
        was_outstanding = self.outstanding.get(update.client_id) == update.origin_round
        if was_outstanding:
            del self.outstanding[update.client_id]
        self._last_answer[update.client_id] = update.origin_round
        if self.done:
            status = "late"
        elif self.cfg.mode == "async" and not was_outstanding:
            status = "duplicate"
        elif self.cfg.mode == "sync":
            status = handle_response_sync(self.state, update)
        else:
            status = self._async_response(update)
        fields = dict(round=update.origin_round, client_id=update.client_id, bytes=wire_bytes,
                      n_samples=update.n_samples, mask=sorted(update.upload_mask), status=status,
                      sha256=sha256(payload))
        if self.log.keep_payloads:
            fields["payload"] = encode_payload(payload)
        self.log.append("response", **fields)

        if status == "accepted" and len(self.state.responded) == self.cfg.response_goal:
            self._complete_sync_round()
        elif status == "aggregated":
            self._after_async_aggregate()
        elif status in ("discarded_stale", "buffered") and not self.done:
            # the answering client's slot goes to a replacement right away
            self._refill()
        return status

    def on_drop(self, client_id: int, round_index: int) -> None:
        """A selected client will never answer its task for ``round_index``."""
        if self.outstanding.get(client_id) == round_index:
            del self.outstanding[client_id]
        self.log.append("drop", round=round_index, client_id=client_id)
        if self.cfg.mode == "async" and not self.outstanding and not self.done:
            self._refill()

    def _async_response(self, update: UpdateRecord) -> str:
        prospective = self.buffer + [update]
        status, new_global = handle_response_async(
            self.buffer, update, self.cfg.async_goal_K, self.cfg.staleness_max, self.round_index,
            self.global_params, self.cfg.server_lr,
        )
        if status == "aggregated":
            ordered = sorted(prospective, key=UpdateRecord.sort_key)
            self._members = ([u.client_id for u in ordered], [u.origin_round for u in ordered])
            self.global_params = new_global
            self._model_version += 1
        return status

    def _complete_sync_round(self) -> None:
        state = self.state
        used = state.responded[: self.cfg.response_goal]
        self.global_params = fedavg_aggregate(used, previous=self.global_params)
        self._model_version += 1
        state.aggregated = True
        on_round_complete(self.controller, state.rebroadcasts_this_round > 0, self.cfg.timeout_k,
                          self.cfg.timeout_delta_s, self.cfg.timeout_floor_s)
        self.env.cancel_timers(state.round_index)
        self.log.append("aggregate", round=state.round_index,
                        clients=sorted(u.client_id for u in used),
                        origins=[u.origin_round for u in sorted(used, key=UpdateRecord.sort_key)],
                        digest=self.global_params.digest(), t0=self.controller.current_t0_s)
        if self.on_aggregate is not None:
            self.on_aggregate(state.round_index, self.global_params)
        self.round_index += 1
        self._begin_round()

    def _after_async_aggregate(self) -> None:
        clients, origins = self._members
        self.log.append("aggregate", round=self.round_index, clients=clients, origins=origins,
                        digest=self.global_params.digest(), t0=self.controller.current_t0_s)
        if self.on_aggregate is not None:
            self.on_aggregate(self.round_index, self.global_params)
        self.round_index += 1
        if self.round_index >= self.cfg.max_rounds:
            self.done = True
            return
        self._refill()

    def _refill(self) -> None:
        deficit = self.cfg.async_concurrency - len(self.outstanding)
        if deficit <= 0:
            return
        # a client never gets the same model version twice; it would treat it as a duplicate
        busy = set(self.outstanding) | {c for c, r in self._last_answer.items() if r == self.round_index}
        n_ava = self.env.n_available(busy)
        count = min(n_ava, deficit)
        self._broadcast(count, busy, n_ava, rebroadcast=False)
        if not self.outstanding:
            raise RoundStalled("asynchronous training has no clients in flight")

    def on_timeout(self, round_index: int) -> int | None:
        """Timer for ``round_index`` fired. Returns the rebroadcast count, or None if the timer was stale."""
        state = self.state
        if (self.done or self.cfg.mode != "sync" or state is None or state.round_index != round_index
                or state.aggregated or len(state.responded) >= self.cfg.response_goal):
            return None
        n_ava_now = self.env.n_available(state.broadcast_set)
        t0_before = self.controller.current_t0_s
        count = on_timeout(state, self.controller, self.cfg.n_participants, n_ava_now, self.env.now())
        self.log.append("timeout", round=round_index, t0_before=t0_before, t0_after=self.controller.current_t0_s,
                        n_ava=n_ava_now, rebroadcast_count=count, deadline=state.deadline)
        if state.rebroadcasts_this_round > self.cfg.max_timeouts_per_round:
            raise RoundStalled(f"round {round_index} timed out {state.rebroadcasts_this_round} times")
        ids = self._broadcast(count, state.broadcast_set, n_ava_now, rebroadcast=True)
        state.broadcast_set.update(ids)
        self.env.set_timer(round_index, state.deadline)
        return count

