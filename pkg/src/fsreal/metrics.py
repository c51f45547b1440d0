"""Accuracy, fairness, convergence, traffic and utilization statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MetricError

SECONDS_PER_HOUR = 3600.0


@dataclass
class ClientEval:
    client_id: int
    accuracy: float
    n_samples: int
    n_contrib: int = 0


def _nonempty(evals: Sequence[ClientEval]) -> None:
    if not evals:
        raise MetricError("no client evaluations")


def weighted_mean_acc(evals: Sequence[ClientEval]) -> float:
    _nonempty(evals)
    total = sum(e.n_samples for e in evals)
    if total <= 0:
        raise MetricError("total sample count must be positive")
    return math.fsum(e.accuracy * e.n_samples for e in evals) / total


def bottom_decile_acc(evals: Sequence[ClientEval]) -> float:
    """Nearest-rank 10th percentile of per-client accuracy."""
    _nonempty(evals)
    accs = sorted(e.accuracy for e in evals)
    rank = math.ceil(0.1 * len(accs))
    return accs[max(rank, 1) - 1]


def acc_std(evals: Sequence[ClientEval]) -> float:
    _nonempty(evals)
    return float(np.std([e.accuracy for e in evals]))


@dataclass
class Convergence:
    conv_round: int
    t_conv_s: float
    converged: bool

    @property
    def t_conv_hours(self) -> float:
        return self.t_conv_s / SECONDS_PER_HOUR


def detect_convergence(history: Sequence[tuple[int, float, float]], patience: int = 20,
                       min_delta: float = 0.001) -> Convergence:
    """Patience-based detector over ``(round, virtual_time_s, val_acc)`` rows.

    The best round only moves when accuracy beats it by more than
    ``min_delta``; convergence is declared once ``patience`` further rounds
    pass without that happening.
    """
    if not history:
        raise MetricError("empty accuracy history")
    best = 0
    for i in range(1, len(history)):
        if history[i][2] > history[best][2] + min_delta:
            best = i
        elif i - best >= patience:
            return Convergence(history[best][0], history[best][1], True)
    last = history[-1]
    return Convergence(last[0], last[1], False)


def utilization(evals: Sequence[ClientEval], t_conv_hours: float) -> tuple[float, float]:
    if not t_conv_hours > 0:
        raise MetricError(f"t_conv must be positive, got {t_conv_hours}")
    if not evals:
        return 0.0, 0.0
    u = np.array([e.n_contrib for e in evals], dtype=np.float64) / t_conv_hours
    return float(u.mean()), float(u.std())


def traffic(event_log: Iterable[dict], duration_s: float) -> tuple[int, float]:
    """Total bytes of all sent messages and the byte rate over ``duration_s``."""
    total = sum(int(e.get("bytes", 0)) for e in event_log if e.get("type") in ("broadcast", "response"))
    rate = total / duration_s if duration_s > 0 else 0.0
    return total, rate


def contributions(event_log: Iterable[dict], up_to_round: int | None = None) -> dict[int, int]:
    counts: dict[int, int] = {}
    for e in event_log:
        if e.get("type") != "aggregate":
            continue
        if up_to_round is not None and e["round"] > up_to_round:
            continue
        for cid in e["clients"]:
            counts[cid] = counts.get(cid, 0) + 1
    return counts


# -- report ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    acc_mean_weighted: float
    acc_bottom_decile: float
    acc_std: float
    t_conv_hours: float
    conv_round: int
    converged: bool
    total_bytes: int
    net_traffic_bytes_per_s: float
    uti_mean: float
    uti_std: float

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_COLUMNS = [f.name for f in fields(MetricsReport)]
RUN_COLUMNS = ["name", "seed", "mode", "algorithm", "codec", "distribution", "total_clients", "rounds_run"]
CSV_COLUMNS = RUN_COLUMNS + METRIC_COLUMNS


def append_csv_row(path: str | Path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv_rows(paths: Iterable[str | Path]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != CSV_COLUMNS:
                raise MetricError(f"{path}: unexpected CSV header {reader.fieldnames}")
            rows.extend(reader)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std of every metric, grouped by run configuration."""
    key_cols = [c for c in RUN_COLUMNS if c not in ("seed", "rounds_run")]
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[c] for c in key_cols), []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        summary = dict(zip(key_cols, key))
        summary["n_runs"] = len(members)
        for col in METRIC_COLUMNS:
            values = np.array([_parse_metric(r[col]) for r in members], dtype=np.float64)
            summary[f"{col}_mean"] = float(values.mean())
            summary[f"{col}_std"] = float(values.std())
        out.append(summary)
    return out


def _parse_metric(text: str) -> float:
    if text in ("True", "False"):
        return 1.0 if text == "True" else 0.0
    return float(text)


def summary_columns() -> list[str]:
    key_cols = [c for c in RUN_COLUMNS if c not in ("seed", "rounds_run")]
    cols = key_cols + ["n_runs"]
    for col in METRIC_COLUMNS:
        cols += [f"{col}_mean", f"{col}_std"]
    return cols
