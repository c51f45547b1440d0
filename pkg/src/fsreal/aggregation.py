"""Server-side aggregation rules: weighted FedAvg and staleness-weighted buffered async."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, ShapeError
from .model import ModelParams


@dataclass
class UpdateRecord:
    client_id: int
    params_or_delta: ModelParams
    n_samples: int
    origin_round: int
    upload_mask: frozenset = field(default=None)

    def __post_init__(self):
        if self.upload_mask is None:
            self.upload_mask = frozenset(self.params_or_delta.names())
        else:
            self.upload_mask = frozenset(self.upload_mask)
        if self.n_samples < 1:
            raise ProtocolError(f"client {self.client_id}: n_samples must be >= 1")
        missing = self.upload_mask - set(self.params_or_delta.names())
        if missing:
            raise ShapeError(f"client {self.client_id}: mask names absent layers {sorted(missing)}")

    def sort_key(self):
        return (self.client_id, self.origin_round)


def _compensated_sum(terms):
    """Per-coordinate Kahan summation over an iterable of equal-shape arrays."""
    total = None
    comp = None
    for term in terms:
        if total is None:
            total = np.array(term, dtype=np.float64, copy=True)
            comp = np.zeros_like(total)
            continue
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _check_layouts(updates):
    sizes: dict[str, int] = {}
    for u in updates:
        for name in u.upload_mask:
            n = u.params_or_delta.layers[name].size
            if sizes.setdefault(name, n) != n:
                raise ShapeError(f"layer {name!r} has length {n} for client {u.client_id}, expected {sizes[name]}")
    return sizes


def fedavg_aggregate(updates: list[UpdateRecord], previous: ModelParams | None = None) -> ModelParams:
    """Data-size weighted average of full-parameter updates, layer by layer.

    Each layer averages only the updates whose upload mask contains it, with
    weights renormalised over those updates.  Layers nobody uploaded keep the
    value from ``previous``.
    """
    if not updates:
        raise ProtocolError("fedavg_aggregate needs at least one update")
    sizes = _check_layouts(updates)
    if previous is not None:
        for name, n in sizes.items():
            if name in previous.layers and previous.layers[name].size != n:
                raise ShapeError(f"layer {name!r} length {n} differs from global length {previous.layers[name].size}")
    ordered = sorted(updates, key=UpdateRecord.sort_key)
    names = list(previous.names()) if previous is not None else []
    names += [n for n in sizes if n not in names]

    out = {}
    for name in names:
        members = [u for u in ordered if name in u.upload_mask]
        if not members:
            if previous is None or name not in previous.layers:
                raise ShapeError(f"layer {name!r} uploaded by nobody and no previous value given")
            out[name] = previous.layers[name].copy()
            continue
        total_n = sum(u.n_samples for u in members)
        ref = members[0].params_or_delta.layers[name]
        # ref + sum w_i (theta_i - ref): exact fixed point when all updates agree
        offset = _compensated_sum(
            (u.n_samples / total_n) * (u.params_or_delta.layers[name] - ref) for u in members
        )
        out[name] = ref + offset
    result = ModelParams(out)
    if not result.is_finite():
        raise FloatingPointError("aggregation produced non-finite parameters")
    return result


def staleness_weight(tau: int) -> float:
    if tau < 0:
        raise ProtocolError(f"negative staleness {tau}")
    return 1.0 / math.sqrt(1.0 + tau)


def fedbuff_aggregate(global_params: ModelParams, buffer: list[UpdateRecord], server_lr: float,
                      current_round: int) -> ModelParams:
    """global + server_lr * mean_i(s(tau_i) * delta_i) with s(tau) = 1/sqrt(1+tau).

    Layers missing from an update's mask contribute a zero delta.
    """
    if not buffer:
        raise ProtocolError("fedbuff_aggregate needs a non-empty buffer")
    _check_layouts(buffer)
    k = len(buffer)
    ordered = sorted(buffer, key=UpdateRecord.sort_key)
    weights = [staleness_weight(current_round - u.origin_round) for u in ordered]
    out = {}
    for name, g in global_params.layers.items():
        terms = [
            w * u.params_or_delta.layers[name]
            for w, u in zip(weights, ordered)
            if name in u.upload_mask
        ]
        for u in ordered:
            if name in u.upload_mask and u.params_or_delta.layers[name].size != g.size:
                raise ShapeError(f"delta for {name!r} from client {u.client_id} has wrong length")
        if not terms:
            out[name] = g.copy()
            continue
        out[name] = g + (server_lr / k) * _compensated_sum(terms)
    result = ModelParams(out)
    if not result.is_finite():
        raise FloatingPointError("aggregation produced non-finite parameters")
    return result
