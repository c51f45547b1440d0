"""Experiment configuration: strict flat TOML files."""

from __future__ import annotations

import difflib
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .sim import SimConfig

# accepted TOML value types per SimConfig field (bool is excluded from numbers on purpose)
_INT = (int,)
_NUM = (int, float)
_SIM_TYPES = {
    "total_clients": _INT, "availability_rate": _NUM, "response_goal": _INT, "over_selection_q": _NUM,
    "timeout_t0_s": _NUM, "timeout_delta_s": _NUM, "timeout_k": _INT, "timeout_floor_s": _NUM,
    "mode": (str,), "async_goal_K": _INT, "async_concurrency": _INT, "max_rounds": _INT, "staleness_max": _INT, "server_lr": _NUM,
    "codec": (str,), "algorithm": (str,), "distribution": (str,), "alpha": _NUM, "beta": _NUM,
    "homo_index": _INT, "n_devices": _INT, "drop_prob": _NUM, "delay_scale": _NUM, "base_per_sample_s": _NUM,
    "zero_latency": (bool,), "n_classes": _INT, "dim": _INT, "samples_per_client": _INT,
    "dirichlet_alpha": _NUM, "hidden": _INT, "learning_rate": _NUM, "batch_size": _INT, "local_epochs": _INT,
    "finetune_epochs": _INT, "patience": _INT, "min_delta": _NUM, "keep_payloads": (bool,),
}
_EXPERIMENT_TYPES = {
    "name": (str,), "seeds": (list,), "repeats": _INT, "out_dir": (str,),
    "net_timeout_t0_s": _NUM, "net_wait_s": _NUM,
}
KNOWN_KEYS = sorted(set(_SIM_TYPES) | set(_EXPERIMENT_TYPES))


@dataclass
class ExperimentConfig:
    sim: SimConfig
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1])
    out_dir: str = "runs"
    net_timeout_t0_s: float = 5.0
    net_wait_s: float = 120.0

    def sim_config(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=seed)

    def net_sim_config(self) -> SimConfig:
        """Config for a distributed run: first seed, desk-scale timeout."""
        t0 = self.net_timeout_t0_s
        return replace(self.sim, seed=self.seeds[0], timeout_t0_s=t0,
                       timeout_floor_s=min(self.sim.timeout_floor_s, t0))


def _suggest(key: str) -> str:
    lowered = {k.lower(): k for k in KNOWN_KEYS}
    match = difflib.get_close_matches(key.lower(), list(lowered), n=1, cutoff=0.5)
    if not match:
        # prefix hits like "async_goal" for "async_goal_K"
        match = [k for k in lowered if k.startswith(key.lower()[:5])][:1]
    return f"; did you mean {lowered[match[0]]!r}?" if match else ""


def _check_type(key: str, value, allowed) -> None:
    if isinstance(value, bool) and bool not in allowed:
        ok = False
    else:
        ok = isinstance(value, allowed)
    if not ok:
        names = " or ".join(t.__name__ for t in allowed)
        raise ConfigError(f"{key}: expected {names}, got {type(value).__name__} {value!r}")


def config_from_dict(raw: dict, source: str = "<config>") -> ExperimentConfig:
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"{source}: tables are not supported, put {key!r} settings at top level")
        if key not in _SIM_TYPES and key not in _EXPERIMENT_TYPES:
            if key == "seed":
                raise ConfigError(f"{source}: unknown key 'seed'; did you mean 'seeds'?")
            raise ConfigError(f"{source}: unknown key {key!r}{_suggest(key)}")
        _check_type(key, value, _SIM_TYPES.get(key) or _EXPERIMENT_TYPES[key])
    if "total_clients" not in raw:
        raise ConfigError(f"{source}: total_clients is required")

    seeds = raw.get("seeds")
    repeats = raw.get("repeats")
    if seeds is not None:
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must not repeat")
        if repeats is not None and repeats != len(seeds):
            raise ConfigError(f"repeats={repeats} disagrees with the {len(seeds)} listed seeds")
    elif repeats is not None:
        if repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {repeats}")
        seeds = list(range(repeats))
    else:
        seeds = [0, 1]

    sim_values = {k: v for k, v in raw.items() if k in _SIM_TYPES}
    for k in ("alpha", "beta"):
        if k in sim_values:
            sim_values[k] = float(sim_values[k])
    sim = SimConfig(seed=seeds[0], **sim_values)
    sim.validate()
    exp = ExperimentConfig(sim, name=raw.get("name", "experiment"), seeds=list(seeds),
                           out_dir=raw.get("out_dir", "runs"),
                           net_timeout_t0_s=float(raw.get("net_timeout_t0_s", 5.0)),
                           net_wait_s=float(raw.get("net_wait_s", 120.0)))
    if not exp.net_timeout_t0_s > 0:
        raise ConfigError(f"net_timeout_t0_s must be > 0, got {exp.net_timeout_t0_s}")
    if not exp.net_wait_s > 0:
        raise ConfigError(f"net_wait_s must be > 0, got {exp.net_wait_s}")
    exp.net_sim_config().validate()
    return exp


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}:{_error_line(exc, text)}: TOML parse error: {exc}") from None
    return config_from_dict(raw, str(path))


def _error_line(exc, text: str) -> int:
    lineno = getattr(exc, "lineno", None)
    if lineno is None:
        pos = getattr(exc, "pos", None)
        lineno = text.count("\n", 0, pos) + 1 if pos is not None else 0
    return lineno


def config_to_toml(exp: ExperimentConfig) -> str:
    """Flat TOML text that loads back to ``exp``."""
    lines = [f"name = {_toml_value(exp.name)}", f"seeds = {_toml_value(exp.seeds)}",
             f"out_dir = {_toml_value(exp.out_dir)}", f"net_timeout_t0_s = {_toml_value(exp.net_timeout_t0_s)}",
             f"net_wait_s = {_toml_value(exp.net_wait_s)}"]
    for f in fields(SimConfig):
        value = getattr(exp.sim, f.name)
        if f.name == "seed" or value is None:
            continue
        lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
