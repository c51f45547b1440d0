"""Discrete-event simulation of a federation on virtual time."""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .client import TaskSpec, execute_task
from .compression import decode, encode
from .data import ClientShard, generate_synthetic_federation
from .devices import DeviceDistribution, DevicePool, response_time
from .errors import ConfigError
from .eventlog import EventLog, encode_payload
from .metrics import (ClientEval, MetricsReport, acc_std, bottom_decile_acc, contributions, detect_convergence,
                      traffic, utilization, weighted_mean_acc)
from .model import Architecture, ModelParams, TrainConfig, accuracy, init_model, personalize_finetune, predict
from .rng import derive_seed, stream
from .server import Processor, ServerConfig

RESPONSE_ARRIVAL = "response_arrival"
TIMEOUT_FIRE = "timeout_fire"
DEVICE_DROP = "device_drop"


@dataclass(order=True)
class Event:
    virtual_time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


def cancel_stale_timers(queue: list[Event], completed_round: int) -> int:
    """Drop pending timeout events for rounds up to ``completed_round``; keeps heap order."""
    keep = [e for e in queue if not (e.kind == TIMEOUT_FIRE and e.payload <= completed_round)]
    removed = len(queue) - len(keep)
    if removed:
        queue[:] = keep
        heapq.heapify(queue)
    return removed


@dataclass
class SimConfig:
    total_clients: int
    seed: int = 0
    availability_rate: float = 0.3
    response_goal: int | None = None
    over_selection_q: float = 1.5
    timeout_t0_s: float = 60.0
    timeout_delta_s: float = 5.0
    timeout_k: int = 3
    timeout_floor_s: float = 1.0
    mode: str = "sync"
    async_goal_K: int | None = None
    async_concurrency: int | None = None
    max_rounds: int = 200
    staleness_max: int = 50
    server_lr: float = 1.0
    codec: str = "none"
    algorithm: str = "fedavg"
    distribution: str = "near_normal"
    alpha: float | None = None
    beta: float | None = None
    homo_index: int = 36
    n_devices: int | None = None
    drop_prob: float = 0.0
    delay_scale: float = 1.0
    base_per_sample_s: float = 0.02
    zero_latency: bool = False
    n_classes: int = 4
    dim: int = 10
    samples_per_client: int = 50
    dirichlet_alpha: float = 0.5
    hidden: int = 32
    learning_rate: float = 0.1
    batch_size: int = 16
    local_epochs: int = 1
    finetune_epochs: int = 5
    patience: int = 20
    min_delta: float = 0.001
    keep_payloads: bool = True

    @property
    def n_participants(self) -> int:
        return max(1, round(self.availability_rate * self.total_clients))

    def device_distribution(self) -> DeviceDistribution:
        return DeviceDistribution.from_name(self.distribution, self.alpha, self.beta, self.homo_index)

    def server_config(self) -> ServerConfig:
        return ServerConfig(
            n_participants=self.n_participants, response_goal=self.response_goal,
            over_selection_q=self.over_selection_q, timeout_t0_s=self.timeout_t0_s,
            timeout_delta_s=self.timeout_delta_s, timeout_k=self.timeout_k, timeout_floor_s=self.timeout_floor_s,
            mode=self.mode, async_goal_K=self.async_goal_K, async_concurrency=self.async_concurrency, max_rounds=self.max_rounds,
            staleness_max=self.staleness_max, server_lr=self.server_lr, codec=self.codec,
            algorithm=self.algorithm, total_clients=self.total_clients,
        )

    def task_spec(self, client_id: int) -> TaskSpec:
        return TaskSpec(client_id, self.seed, self.n_classes, self.dim, self.samples_per_client,
                        self.dirichlet_alpha, self.learning_rate, self.batch_size, self.local_epochs,
                        self.algorithm, self.mode, self.codec)

    def validate(self) -> None:
        if self.total_clients < 1:
            raise ConfigError(f"total_clients must be >= 1, got {self.total_clients}")
        if not 0 < self.availability_rate <= 1:
            raise ConfigError(f"availability_rate must be in (0, 1], got {self.availability_rate}")
        if not 0 <= self.drop_prob < 1:
            raise ConfigError(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        if self.delay_scale < 0 or self.base_per_sample_s < 0:
            raise ConfigError("delay_scale and base_per_sample_s must be >= 0")
        if self.n_devices is not None and self.n_devices < 1:
            raise ConfigError(f"n_devices must be >= 1, got {self.n_devices}")
        if self.hidden < 1 or self.finetune_epochs < 0 or self.patience < 1 or self.min_delta < 0:
            raise ConfigError("hidden >= 1, finetune_epochs >= 0, patience >= 1 and min_delta >= 0 are required")
        self.device_distribution()
        self.server_config()
        TrainConfig(self.learning_rate, self.local_epochs, self.batch_size, 0)
        if self.n_classes < 2 or self.dim < 1 or self.samples_per_client < 1 or not self.dirichlet_alpha > 0:
            raise ConfigError("n_classes >= 2, dim >= 1, samples_per_client >= 1 and dirichlet_alpha > 0 are required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def select_clients(seed: int, round_index: int, call: int, idle: list[int], count: int) -> list[int]:
    """Uniform choice without replacement from ``idle``, drawn from the (round, call) selection stream."""
    if count <= 0 or not idle:
        return []
    rng = stream(seed, "select", round_index, call)
    return sorted(int(idle[i]) for i in rng.choice(len(idle), size=min(count, len(idle)), replace=False))


@dataclass
class SimResult:
    events: EventLog
    report: MetricsReport
    final_model: ModelParams
    evals: list[ClientEval]
    history: list[tuple[int, float, float]]

    @property
    def round_times(self) -> list[float]:
        """Virtual duration of each aggregation round."""
        times = [e["ts"] for e in self.events.of_type("aggregate")]
        return list(np.diff([0.0] + times))


class Simulation:
    """Owns virtual time, the event queue, and client/device busy state."""

    def __init__(self, cfg: SimConfig, shards: list[ClientShard], pool: DevicePool, init: ModelParams):
        self.cfg = cfg
        self.shards = shards
        self.pool = pool
        self.init = init
        self.time = 0.0
        self.queue: list[Event] = []
        self._seq = 0
        self._alloc_calls = 0
        self.in_flight: dict[int, int] = {}  # client -> device
        self.log = EventLog(clock=self.now, keep_payloads=cfg.keep_payloads)
        self.evaluator = RunEvaluator(cfg, shards)
        self.specs = [cfg.task_spec(s.client_id) for s in shards]
        self.processor = Processor(cfg.server_config(), init, self, self.log,
                                   known_clients=range(len(shards)), on_aggregate=self._evaluate)

    # environment interface

    def now(self) -> float:
        return self.time

    def _idle(self, exclude) -> list[int]:
        return [c for c in range(len(self.shards)) if c not in self.in_flight and c not in exclude]

    def n_available(self, exclude) -> int:
        return min(len(self._idle(exclude)), self.pool.n_available())

    def allocate(self, round_index: int, count: int, exclude) -> list[int]:
        call = self._alloc_calls
        self._alloc_calls += 1
        if count <= 0:
            return []
        picked = select_clients(self.cfg.seed, round_index, call, self._idle(exclude), count)
        devices = self.pool.allocate(len(picked), stream(self.cfg.seed, "device_alloc", round_index, call))
        for cid, dev in zip(picked, devices):
            self.in_flight[cid] = dev
        return picked[: len(devices)]

    def send_task(self, round_index: int, client_ids: list[int], payload: bytes) -> None:
        received = decode(payload, self.cfg.codec)
        for cid in client_ids:
            up_payload, update = execute_task(self.specs[cid], self.shards[cid], received, round_index)
            delay = self._latency(cid, round_index, len(payload), len(up_payload))
            dropped = self.cfg.drop_prob > 0 and stream(self.cfg.seed, "drop", round_index, cid).random() < self.cfg.drop_prob
            if dropped:
                self._push(self.time + delay, DEVICE_DROP, (cid, round_index))
            else:
                self._push(self.time + delay, RESPONSE_ARRIVAL, (cid, update, up_payload))

    def set_timer(self, round_index: int, deadline: float) -> None:
        self._push(deadline, TIMEOUT_FIRE, round_index)

    def cancel_timers(self, round_index: int) -> None:
        cancel_stale_timers(self.queue, round_index)

    # internals

    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self.queue, Event(t, self._seq, kind, payload))
        self._seq += 1

    def _latency(self, cid: int, round_index: int, down_bytes: int, up_bytes: int) -> float:
        if self.cfg.zero_latency:
            return 0.0
        cap = self.pool.capabilities[self.in_flight[cid]]
        rng = stream(self.cfg.seed, "latency", round_index, cid)
        return response_time(cap, down_bytes, self.shards[cid].n_samples * self.cfg.local_epochs, rng,
                             base_per_sample_s=self.cfg.base_per_sample_s, delay_scale=self.cfg.delay_scale,
                             upload_bytes=up_bytes)

    def _release(self, cid: int) -> None:
        self.pool.release(self.in_flight.pop(cid))

    def _evaluate(self, round_index: int, model: ModelParams) -> None:
        self.evaluator.record(round_index, self.time, model, self.log)

    def run(self) -> SimResult:
        cfg = self.cfg
        self.log.append("run_start", config=cfg.to_dict(), init=encode_payload(encode(self.init, "none")),
                        digest=self.init.digest(),
                        devices=[c.capacity_index for c in self.pool.capabilities], clock="virtual")
        self.processor.start()
        while not self.processor.done:
            if not self.queue:
                raise RuntimeError("event queue drained before the run finished")
            ev = heapq.heappop(self.queue)
            if ev.virtual_time < self.time:
                raise RuntimeError("virtual time went backwards")
            self.time = ev.virtual_time
            if ev.kind == RESPONSE_ARRIVAL:
                cid, update, payload = ev.payload
                self._release(cid)
                self.processor.on_response(update, payload)
            elif ev.kind == TIMEOUT_FIRE:
                self.processor.on_timeout(ev.payload)
            elif ev.kind == DEVICE_DROP:
                cid, round_index = ev.payload
                self._release(cid)
                self.processor.on_drop(cid, round_index)
        final = self.processor.global_params
        self.log.append("run_end", digest=final.digest(), rounds=self.processor.round_index)
        return self._finish(final)

    def _finish(self, final: ModelParams) -> SimResult:
        report, evals = self.evaluator.finish(final, self.log)
        return SimResult(self.log, report, final, evals, self.evaluator.history)


class RunEvaluator:
    """Validation accuracy after each aggregation, and the end-of-run personalised test metrics."""

    def __init__(self, cfg: SimConfig, shards: list[ClientShard]):
        self.cfg = cfg
        self.shards = shards
        self.history: list[tuple[int, float, float]] = []
        self._val = _stack_split(shards, "val")

    def record(self, round_index: int, time_s: float, model: ModelParams, log: EventLog) -> float:
        acc = _weighted_split_accuracy(model, self._val, self.shards)
        self.history.append((round_index, time_s, acc))
        log.append("eval", round=round_index, val_acc=acc)
        return acc

    def finish(self, final: ModelParams, log: EventLog) -> tuple[MetricsReport, list[ClientEval]]:
        cfg = self.cfg
        if not self.history:
            raise RuntimeError("run finished without a single aggregation")
        conv = detect_convergence(self.history, cfg.patience, cfg.min_delta)
        counts = contributions(log, up_to_round=conv.conv_round)
        evals = []
        for shard in self.shards:
            model = final
            if cfg.algorithm in ("ft", "fedbabu") and cfg.finetune_epochs > 0:
                ft_cfg = TrainConfig(cfg.learning_rate, cfg.finetune_epochs, cfg.batch_size,
                                     derive_seed(cfg.seed, "finetune", shard.client_id))
                model = personalize_finetune(final, shard, ft_cfg, epochs=cfg.finetune_epochs)
            acc = accuracy(model, shard.test_features, shard.test_labels)
            evals.append(ClientEval(shard.client_id, acc, shard.n_samples, counts.get(shard.client_id, 0)))
        return build_report(log.events, evals, conv), evals


def build_report(events: list[dict], evals: list[ClientEval], conv) -> MetricsReport:
    """Metrics over the log prefix that ends with the convergence round's aggregation."""
    cut = len(events)
    for e in events:
        if e["type"] == "aggregate" and e["round"] == conv.conv_round:
            cut = e["seq"] + 1
            break
    total, rate = traffic(events[:cut], conv.t_conv_s)
    if conv.t_conv_s > 0:
        uti_mean, uti_std = utilization(evals, conv.t_conv_hours)
    else:
        uti_mean, uti_std = 0.0, 0.0
    return MetricsReport(
        acc_mean_weighted=weighted_mean_acc(evals), acc_bottom_decile=bottom_decile_acc(evals),
        acc_std=acc_std(evals), t_conv_hours=conv.t_conv_hours, conv_round=conv.conv_round,
        converged=conv.converged, total_bytes=total, net_traffic_bytes_per_s=rate,
        uti_mean=uti_mean, uti_std=uti_std,
    )


def _stack_split(shards: list[ClientShard], split: str):
    xs = [getattr(s, f"{split}_features") for s in shards]
    ys = [getattr(s, f"{split}_labels") for s in shards]
    owner = np.concatenate([np.full(len(y), i) for i, y in enumerate(ys)])
    return np.concatenate(xs), np.concatenate(ys), owner


def _weighted_split_accuracy(model: ModelParams, stacked, shards: list[ClientShard]) -> float:
    x, y, owner = stacked
    correct = (predict(model, x) == y).astype(np.float64)
    n_clients = len(shards)
    per_client = np.bincount(owner, weights=correct, minlength=n_clients) / np.maximum(
        np.bincount(owner, minlength=n_clients), 1)
    evals = [ClientEval(s.client_id, float(a), s.n_samples) for s, a in zip(shards, per_client)]
    return weighted_mean_acc(evals)


def build_simulation(cfg: SimConfig) -> Simulation:
    cfg.validate()
    shards = generate_synthetic_federation(cfg.total_clients, cfg.n_classes, cfg.dim, cfg.samples_per_client,
                                           cfg.dirichlet_alpha, cfg.seed)
    arch = Architecture(cfg.dim, cfg.hidden, cfg.n_classes)
    init = init_model(arch, derive_seed(cfg.seed, "init"))
    n_devices = cfg.n_devices if cfg.n_devices is not None else cfg.total_clients
    pool = DevicePool.sample(n_devices, cfg.device_distribution(), stream(cfg.seed, "devices"))
    return Simulation(cfg, shards, pool, init)


def run(cfg: SimConfig) -> SimResult:
    return build_simulation(cfg).run()
