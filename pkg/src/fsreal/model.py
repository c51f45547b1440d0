"""Model parameters, the one-hidden-layer classifier, and local SGD.

Parameters are kept as float64 layers named ``body`` (hidden layer weights
and biases) and ``head`` (softmax classifier weights and biases).  Anything
that crosses the wire is rounded to float32 by the codecs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DecodeError, ShapeError

BODY = "body"
HEAD = "head"
LAYER_ORDER = (BODY, HEAD)

FINETUNE_EPOCHS = 5


class ModelParams:
    """Ordered mapping of layer name to a 1-D float64 vector."""

    __slots__ = ("layers",)

    def __init__(self, layers: Mapping[str, np.ndarray]):
        ordered = {}
        for name in sorted(layers, key=_layer_sort_key):
            arr = np.ascontiguousarray(layers[name], dtype=np.float64).reshape(-1)
            ordered[name] = arr
        self.layers: dict[str, np.ndarray] = ordered

    @property
    def layout(self) -> dict[str, tuple[int, int]]:
        out, offset = {}, 0
        for name, arr in self.layers.items():
            out[name] = (offset, arr.size)
            offset += arr.size
        return out

    @property
    def size(self) -> int:
        return sum(a.size for a in self.layers.values())

    @property
    def body(self) -> np.ndarray:
        return self.layers[BODY]

    @property
    def head(self) -> np.ndarray:
        return self.layers[HEAD]

    def names(self) -> tuple[str, ...]:
        return tuple(self.layers)

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate(list(self.layers.values()))

    @classmethod
    def from_flat(cls, layout: Mapping[str, tuple[int, int]], flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(length for _, length in layout.values())
        if flat.size != total:
            raise ShapeError(f"flat vector has {flat.size} values, layout needs {total}")
        return cls({name: flat[off:off + length].copy() for name, (off, length) in layout.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.layers.items()})

    def subset(self, names: Iterable[str]) -> "ModelParams":
        names = set(names)
        unknown = names - set(self.layers)
        if unknown:
            raise ShapeError(f"unknown layers {sorted(unknown)}")
        return ModelParams({k: v.copy() for k, v in self.layers.items() if k in names})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.layers.values())

    def same_shape(self, other: "ModelParams") -> bool:
        return self.layout == other.layout

    def __eq__(self, other: object) -> bool:
        # bitwise equality, so -0.0 != 0.0 and NaN payloads are compared as bytes
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.layout != other.layout:
            return False
        return all(self.layers[k].tobytes() == other.layers[k].tobytes() for k in self.layers)

    def __repr__(self) -> str:
        parts = ", ".join(f"{k}[{v.size}]" for k, v in self.layers.items())
        return f"ModelParams({parts})"

    def digest(self) -> str:
        """sha256 over layout table and float64 little-endian values."""
        h = hashlib.sha256()
        h.update(layout_table(self))
        for arr in self.layers.values():
            h.update(arr.astype("<f8").tobytes())
        return h.hexdigest()

    def rounded_to_f32(self) -> "ModelParams":
        return ModelParams({k: v.astype(np.float32).astype(np.float64) for k, v in self.layers.items()})


def _layer_sort_key(name: str):
    if name in LAYER_ORDER:
        return (0, LAYER_ORDER.index(name), name)
    return (1, 0, name)


# -- canonical serialization -------------------------------------------------

def layout_table(params: ModelParams) -> bytes:
    out = bytearray(struct.pack("<B", len(params.layers)))
    for name, arr in params.layers.items():
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise ShapeError(f"layer name too long: {name!r}")
        out += struct.pack("<B", len(raw)) + raw + struct.pack("<I", arr.size)
    return bytes(out)


def parse_layout_table(buf: bytes, offset: int = 0) -> tuple[list[tuple[str, int]], int]:
    """Returns ``([(name, length), ...], offset_after_table)``."""
    if offset + 1 > len(buf):
        raise DecodeError("truncated layout table: missing layer count", offset)
    (count,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    entries = []
    for _ in range(count):
        if offset + 1 > len(buf):
            raise DecodeError("truncated layout table: missing name length", offset)
        name_len = buf[offset]
        offset += 1
        if offset + name_len + 4 > len(buf):
            raise DecodeError("truncated layout table entry", offset)
        try:
            name = bytes(buf[offset:offset + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("layer name is not valid UTF-8", offset) from None
        offset += name_len
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if any(name == n for n, _ in entries):
            raise DecodeError(f"duplicate layer {name!r}", offset - 4 - name_len)
        entries.append((name, length))
    return entries, offset


def serialize(params: ModelParams) -> bytes:
    """Layout table followed by every layer as little-endian float32."""
    parts = [layout_table(params)]
    parts.extend(arr.astype("<f4").tobytes() for arr in params.layers.values())
    return b"".join(parts)


def deserialize(buf: bytes, offset: int = 0) -> tuple[ModelParams, int]:
    entries, offset = parse_layout_table(buf, offset)
    layers = {}
    for name, length in entries:
        end = offset + 4 * length
        if end > len(buf):
            raise DecodeError(f"truncated data for layer {name!r}", offset)
        layers[name] = np.frombuffer(buf, dtype="<f4", count=length, offset=offset).astype(np.float64)
        offset = end
    return ModelParams(layers), offset


# -- architecture ---------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    dim: int
    hidden: int
    n_classes: int

    @property
    def body_size(self) -> int:
        return self.dim * self.hidden + self.hidden

    @property
    def head_size(self) -> int:
        return self.hidden * self.n_classes + self.n_classes

    @classmethod
    def infer(cls, params: ModelParams, dim: int) -> "Architecture":
        if BODY not in params.layers or HEAD not in params.layers:
            raise ShapeError(f"model needs layers {LAYER_ORDER}, got {params.names()}")
        body, head = params.body.size, params.head.size
        if body % (dim + 1):
            raise ShapeError(f"body of {body} values does not fit input dim {dim}")
        hidden = body // (dim + 1)
        if hidden == 0 or head % (hidden + 1):
            raise ShapeError(f"head of {head} values does not fit hidden width {hidden}")
        return cls(dim, hidden, head // (hidden + 1))

    def unpack(self, params: ModelParams):
        body, head = params.body, params.head
        if body.size != self.body_size or head.size != self.head_size:
            raise ShapeError(f"params {params!r} do not match {self}")
        w1 = body[: self.dim * self.hidden].reshape(self.dim, self.hidden)
        b1 = body[self.dim * self.hidden:]
        w2 = head[: self.hidden * self.n_classes].reshape(self.hidden, self.n_classes)
        b2 = head[self.hidden * self.n_classes:]
        return w1, b1, w2, b2


def init_model(arch: Architecture, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, values on the float32 grid."""
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (arch.dim + arch.hidden))
    lim2 = np.sqrt(6.0 / (arch.hidden + arch.n_classes))
    w1 = rng.uniform(-lim1, lim1, size=arch.dim * arch.hidden)
    w2 = rng.uniform(-lim2, lim2, size=arch.hidden * arch.n_classes)
    body = np.concatenate([w1, np.zeros(arch.hidden)])
    head = np.concatenate([w2, np.zeros(arch.n_classes)])
    return ModelParams({BODY: body, HEAD: head}).rounded_to_f32()


def logits(arch: Architecture, params: ModelParams, x: np.ndarray) -> np.ndarray:
    w1, b1, w2, b2 = arch.unpack(params)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def loss_and_grad(arch: Architecture, params: ModelParams, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient per layer."""
    w1, b1, w2, b2 = arch.unpack(params)
    m = x.shape[0]
    h = np.tanh(x @ w1 + b1)
    z = h @ w2 + b2
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(m), y])))

    dz = p
    dz[np.arange(m), y] -= 1.0
    dz /= m
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dh = (dz @ w2.T) * (1.0 - h * h)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    grads = {
        BODY: np.concatenate([gw1.reshape(-1), gb1]),
        HEAD: np.concatenate([gw2.reshape(-1), gb2]),
    }
    return loss, grads


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    arch = Architecture.infer(params, x.shape[1])
    return logits(arch, params, x).argmax(axis=1)


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(params, x) == y))


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def local_train(model: ModelParams, shard, cfg: TrainConfig, frozen_layers=frozenset()) -> ModelParams:
    """Mini-batch SGD on softmax cross-entropy; frozen layers are returned untouched."""
    x, y = shard.features, shard.labels
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"features {x.shape} and labels {y.shape} disagree")
    arch = Architecture.infer(model, x.shape[1])
    unknown = set(frozen_layers) - set(model.names())
    if unknown:
        raise ShapeError(f"frozen layers {sorted(unknown)} not in model")

    params = model.copy()
    trainable = [name for name in params.names() if name not in frozen_layers]
    if cfg.local_epochs == 0 or cfg.learning_rate == 0 or not trainable:
        return params

    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_grad(arch, params, x[idx], y[idx])
            for name in trainable:
                params.layers[name] -= cfg.learning_rate * grads[name]
    if not params.is_finite():
        raise FloatingPointError("local training diverged (non-finite parameters)")
    return params


def personalize_finetune(model: ModelParams, shard, cfg: TrainConfig,
                         epochs: int = FINETUNE_EPOCHS) -> ModelParams:
    """Local fine-tuning of every layer before evaluation."""
    ft_cfg = TrainConfig(cfg.learning_rate, epochs, cfg.batch_size, cfg.seed)
    return local_train(model, shard, ft_cfg)


UPLOAD_MODES = {
    "fedavg": frozenset({BODY, HEAD}),
    "ft": frozenset({BODY, HEAD}),
    "fedbabu": frozenset({BODY}),
}


def make_upload_mask(mode: str) -> frozenset:
    try:
        return UPLOAD_MODES[mode]
    except KeyError:
        raise ConfigError(f"unknown algorithm {mode!r}; expected one of {sorted(UPLOAD_MODES)}") from None


def frozen_layers_for(mode: str) -> frozenset:
    """Layers a client keeps fixed during federated training."""
    return frozenset({BODY, HEAD}) - make_upload_mask(mode)
