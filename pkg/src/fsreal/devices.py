"""Heterogeneous device capabilities, capability distributions, and the device pool."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ConfigError

N_CAPABILITIES = 72
CORES = (1, 2, 3, 4)
FREQS_GHZ = (2.55, 2.9, 3.3)
MEMORY_MB = (256, 1024)


@dataclass(frozen=True)
class NetworkProfile:
    delay_range_s: tuple[float, float]
    up_kbps: float
    down_kbps: float


# worst to best; delay ranges and bandwidth pairs coupled in order
NETWORKS = (
    NetworkProfile((80.0, 400.0), 58_000.0, 173_000.0),
    NetworkProfile((35.0, 200.0), 75_000.0, 285_000.0),
    NetworkProfile((0.0, 0.0), 340_000.0, 1_024_000.0),
)


@dataclass(frozen=True)
class DeviceCapability:
    cores: int
    freq_ghz: float
    memory_mb: int
    net: NetworkProfile
    capacity_index: int = -1


@lru_cache(maxsize=1)
def _capability_table() -> tuple[DeviceCapability, ...]:
    levels = (CORES, FREQS_GHZ, MEMORY_MB, NETWORKS)

    def score(combo_idx):
        # mean of per-factor ranks normalised to [0, 1]; exact to keep ties exact
        return sum(Fraction(i, len(lv) - 1) for i, lv in zip(combo_idx, levels)) / len(levels)

    combos = list(itertools.product(*(range(len(lv)) for lv in levels)))
    combos.sort(key=lambda c: (score(c), c))
    table = []
    for idx, (c, f, m, n) in enumerate(combos):
        table.append(DeviceCapability(CORES[c], FREQS_GHZ[f], MEMORY_MB[m], NETWORKS[n], idx))
    return tuple(table)


def capability_from_index(i: int) -> DeviceCapability:
    """Capability at rank ``i`` of the diagonal capacity order (0 weakest, 71 strongest)."""
    if not isinstance(i, (int, np.integer)) or not 0 <= i < N_CAPABILITIES:
        raise ConfigError(f"capacity index must be an integer in [0, {N_CAPABILITIES - 1}], got {i!r}")
    return _capability_table()[int(i)]


def beta_binomial_pmf(i: int, alpha: float, beta: float, n: int = N_CAPABILITIES - 1) -> float:
    if not (alpha > 0 and beta > 0):
        raise ConfigError(f"beta-binomial needs alpha, beta > 0, got ({alpha}, {beta})")
    if not 0 <= i <= n:
        return 0.0
    log_choose = math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
    log_b = (math.lgamma(i + alpha) + math.lgamma(n - i + beta) - math.lgamma(n + alpha + beta)
             - (math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)))
    return math.exp(log_choose + log_b)


@lru_cache(maxsize=64)
def beta_binomial_table(alpha: float, beta: float, n: int = N_CAPABILITIES - 1) -> np.ndarray:
    pmf = np.array([beta_binomial_pmf(i, alpha, beta, n) for i in range(n + 1)])
    pmf.setflags(write=False)
    return pmf


PRESETS = {
    "near_normal": (10.0, 10.0),
    "strong_heavy": (10.0, 2.0),
    "double_tails": (0.2, 0.2),
}


@dataclass(frozen=True)
class DeviceDistribution:
    kind: str
    index: int = 0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("homo", "uniform", "beta_binomial"):
            raise ConfigError(f"unknown device distribution {self.kind!r}")
        if self.kind == "homo":
            capability_from_index(self.index)
        if self.kind == "beta_binomial" and not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(f"beta-binomial needs alpha, beta > 0, got ({self.alpha}, {self.beta})")

    @classmethod
    def homo(cls, index: int) -> "DeviceDistribution":
        return cls("homo", index=index)

    @classmethod
    def uniform(cls) -> "DeviceDistribution":
        return cls("uniform")

    @classmethod
    def beta_binomial(cls, alpha: float, beta: float) -> "DeviceDistribution":
        return cls("beta_binomial", alpha=float(alpha), beta=float(beta))

    @classmethod
    def from_name(cls, name: str, alpha: float | None = None, beta: float | None = None,
                  index: int | None = None) -> "DeviceDistribution":
        if name in PRESETS:
            return cls.beta_binomial(*PRESETS[name])
        if name == "homo":
            return cls.homo(36 if index is None else index)
        if name == "uniform":
            return cls.uniform()
        if name == "beta_binomial":
            if alpha is None or beta is None:
                raise ConfigError("distribution 'beta_binomial' needs both alpha and beta")
            return cls.beta_binomial(alpha, beta)
        raise ConfigError(
            f"unknown distribution {name!r}; expected homo, uniform, beta_binomial or one of {sorted(PRESETS)}"
        )

    def pmf(self) -> np.ndarray:
        if self.kind == "homo":
            p = np.zeros(N_CAPABILITIES)
            p[self.index] = 1.0
            return p
        if self.kind == "uniform":
            return np.full(N_CAPABILITIES, 1.0 / N_CAPABILITIES)
        return np.asarray(beta_binomial_table(self.alpha, self.beta))


def sample_capacity_indices(dist: DeviceDistribution, rng: np.random.Generator, size: int) -> np.ndarray:
    if dist.kind == "homo":
        return np.full(size, dist.index, dtype=np.int64)
    if dist.kind == "uniform":
        return rng.integers(0, N_CAPABILITIES, size=size)
    cdf = np.cumsum(beta_binomial_table(dist.alpha, dist.beta))
    u = rng.random(size)
    # inverse CDF; clamp guards u above a cdf tail that sums to 1 - eps
    return np.minimum(np.searchsorted(cdf, u, side="right"), N_CAPABILITIES - 1)


def sample_capacity_index(dist: DeviceDistribution, rng: np.random.Generator) -> int:
    return int(sample_capacity_indices(dist, rng, 1)[0])


DEFAULT_BASE_PER_SAMPLE_S = 0.02


def compute_seconds(cap: DeviceCapability, n_samples: int,
                    base_per_sample_s: float = DEFAULT_BASE_PER_SAMPLE_S) -> float:
    return n_samples * base_per_sample_s / (cap.cores * cap.freq_ghz)


def response_time(cap: DeviceCapability, model_bytes: int, n_samples: int, rng: np.random.Generator | None,
                  base_per_sample_s: float = DEFAULT_BASE_PER_SAMPLE_S, delay_scale: float = 1.0,
                  upload_bytes: int | None = None) -> float:
    """Upload + download transfer, local compute, and a uniform network delay draw.

    ``model_bytes`` is the downloaded model size; the upload uses the same size
    unless ``upload_bytes`` says otherwise (compressed or partial uploads).
    """
    if upload_bytes is None:
        upload_bytes = model_bytes
    if model_bytes < 0 or upload_bytes < 0 or n_samples < 0:
        raise ConfigError("model sizes and n_samples must be >= 0")
    t = 8.0 * upload_bytes / (cap.net.up_kbps * 1000.0) + 8.0 * model_bytes / (cap.net.down_kbps * 1000.0)
    t += compute_seconds(cap, n_samples, base_per_sample_s)
    lo, hi = cap.net.delay_range_s
    if hi > lo:
        if rng is None:
            raise ConfigError("a random generator is needed for a non-degenerate delay range")
        t += delay_scale * rng.uniform(lo, hi)
    else:
        t += delay_scale * lo
    return t


class DevicePool:
    """Devices with busy flags. Single owner: callers serialise access."""

    def __init__(self, capabilities: list[DeviceCapability]):
        self.capabilities = list(capabilities)
        self.busy = [False] * len(self.capabilities)

    @classmethod
    def sample(cls, n_devices: int, dist: DeviceDistribution, rng: np.random.Generator) -> "DevicePool":
        idx = sample_capacity_indices(dist, rng, n_devices)
        return cls([capability_from_index(int(i)) for i in idx])

    def __len__(self) -> int:
        return len(self.capabilities)

    def available(self) -> list[int]:
        return [d for d, b in enumerate(self.busy) if not b]

    def n_available(self) -> int:
        return self.busy.count(False)

    def allocate(self, count: int, rng: np.random.Generator) -> list[int]:
        free = self.available()
        take = min(max(count, 0), len(free))
        if take == 0:
            return []
        chosen = rng.choice(len(free), size=take, replace=False)
        ids = [free[int(i)] for i in chosen]
        for d in ids:
            self.busy[d] = True
        return ids

    def release(self, device_id: int) -> None:
        if not self.busy[device_id]:
            raise RuntimeError(f"device {device_id} released while idle")
        self.busy[device_id] = False
