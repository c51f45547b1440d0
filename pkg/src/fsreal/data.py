"""Synthetic non-IID federation: Gaussian class clusters with Dirichlet label skew."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import stream

MEAN_NORM = 3.0


@dataclass
class ClientShard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    val_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    val_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    test_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other):
        if not isinstance(other, ClientShard):
            return NotImplemented
        arrays = ("features", "labels", "val_features", "val_labels", "test_features", "test_labels")
        return self.client_id == other.client_id and all(
            getattr(self, a).dtype == getattr(other, a).dtype
            and getattr(self, a).shape == getattr(other, a).shape
            and getattr(self, a).tobytes() == getattr(other, a).tobytes()
            for a in arrays
        )


def eval_split_size(samples_per_client: int) -> int:
    # 6:2:2 train/valid/test, so each held-out split is a third of the training size
    return max(1, math.ceil(samples_per_client / 3))


def class_means(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """(n_classes, dim) cluster centres of norm 3, orthogonal when dim allows."""
    rng = stream(seed, "class_means")
    g = rng.standard_normal((dim, n_classes))
    if n_classes <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        directions = q.T
    else:
        directions = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    return MEAN_NORM * directions


def _validate(n_clients, n_classes, dim, samples_per_client, dirichlet_alpha):
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if samples_per_client < 1:
        raise ConfigError(f"samples_per_client must be >= 1, got {samples_per_client}")
    if not dirichlet_alpha > 0 or not math.isfinite(dirichlet_alpha):
        raise ConfigError(f"dirichlet_alpha must be finite and > 0, got {dirichlet_alpha}")


def generate_client_shard(client_id: int, n_classes: int, dim: int, samples_per_client: int,
                          dirichlet_alpha: float, seed: int, means: np.ndarray | None = None) -> ClientShard:
    """One client's shard; depends only on (seed, client_id) and the data parameters."""
    _validate(client_id + 1, n_classes, dim, samples_per_client, dirichlet_alpha)
    if means is None:
        means = class_means(n_classes, dim, seed)
    rng = stream(seed, "client_data", client_id)
    props = rng.dirichlet(np.full(n_classes, float(dirichlet_alpha)))
    if not np.all(np.isfinite(props)) or props.sum() <= 0:
        # extremely small alpha can underflow every component
        props = np.zeros(n_classes)
        props[rng.integers(n_classes)] = 1.0
    props = props / props.sum()
    n_eval = eval_split_size(samples_per_client)
    total = samples_per_client + 2 * n_eval
    labels = rng.choice(n_classes, size=total, p=props).astype(np.int64)
    features = means[labels] + rng.standard_normal((total, dim))
    a, b = samples_per_client, samples_per_client + n_eval
    return ClientShard(
        client_id=client_id,
        features=features[:a], labels=labels[:a],
        val_features=features[a:b], val_labels=labels[a:b],
        test_features=features[b:], test_labels=labels[b:],
    )


def generate_synthetic_federation(n_clients: int, n_classes: int, dim: int, samples_per_client: int,
                                  dirichlet_alpha: float, seed: int) -> list[ClientShard]:
    _validate(n_clients, n_classes, dim, samples_per_client, dirichlet_alpha)
    means = class_means(n_classes, dim, seed)
    return [
        generate_client_shard(cid, n_classes, dim, samples_per_client, dirichlet_alpha, seed, means)
        for cid in range(n_clients)
    ]


def label_entropy(labels: np.ndarray, n_classes: int) -> float:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
