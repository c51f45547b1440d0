"""Model payload codecs: none, gzip, fp16, int8.

Payload layout is ``[codec id u8][layout table][per-layer data]``.  For
``gzip`` everything after the codec id is the gzip stream of the canonical
FP32 serialization.  For ``int8`` each layer's bytes are preceded by its
float32 scale.
"""

from __future__ import annotations

import gzip
import struct
import zlib

import numpy as np

from .errors import DecodeError, EncodeError
from .model import ModelParams, layout_table, parse_layout_table, serialize, deserialize

CODEC_IDS = {"none": 0, "gzip": 1, "fp16": 2, "int8": 3}
CODEC_NAMES = {v: k for k, v in CODEC_IDS.items()}

FP16_MAX = float(np.finfo(np.float16).max)
INT8_LEVELS = 127


def codec_id(codec: str) -> int:
    try:
        return CODEC_IDS[codec]
    except KeyError:
        raise EncodeError(f"unknown codec {codec!r}; expected one of {sorted(CODEC_IDS)}") from None


def int8_scale(values: np.ndarray) -> float:
    """Per-layer symmetric scale, already rounded to the float32 stored on the wire."""
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak == 0.0:
        return 1.0
    return float(np.float32(peak / INT8_LEVELS))


def quantize_int8(values: np.ndarray) -> tuple[np.ndarray, float]:
    scale = int8_scale(values)
    q = np.clip(np.rint(values / scale), -INT8_LEVELS, INT8_LEVELS).astype(np.int8)
    return q, scale


def encode(params: ModelParams, codec: str) -> bytes:
    cid = codec_id(codec)
    if not params.is_finite():
        raise EncodeError("cannot encode NaN or Inf parameters")
    head = struct.pack("<B", cid)
    if codec == "none":
        return head + serialize(params)
    if codec == "gzip":
        return head + gzip.compress(serialize(params), compresslevel=9, mtime=0)
    parts = [head, layout_table(params)]
    if codec == "fp16":
        for arr in params.layers.values():
            parts.append(np.clip(arr, -FP16_MAX, FP16_MAX).astype("<f2").tobytes())
    else:
        for arr in params.layers.values():
            q, scale = quantize_int8(arr)
            parts.append(struct.pack("<f", scale))
            parts.append(q.tobytes())
    return b"".join(parts)


def decode(payload: bytes, codec: str | None = None) -> ModelParams:
    """Inverse of :func:`encode`. ``codec``, when given, must match the payload's id byte."""
    if len(payload) < 1:
        raise DecodeError("empty payload", 0)
    cid = payload[0]
    if cid not in CODEC_NAMES:
        raise DecodeError(f"unknown codec id {cid}", 0)
    name = CODEC_NAMES[cid]
    if codec is not None and codec != name:
        raise DecodeError(f"payload codec {name!r} does not match expected {codec!r}", 0)

    if name == "gzip":
        raw = _gunzip_single_member(payload, 1)
        params, end = _deserialize_checked(raw, 0)
        if end != len(raw):
            raise DecodeError("trailing bytes after decompressed payload", 1)
        return params
    if name == "none":
        params, end = _deserialize_checked(payload, 1)
        if end != len(payload):
            raise DecodeError("trailing bytes after payload", end)
        return params

    entries, offset = parse_layout_table(payload, 1)
    layers = {}
    for lname, length in entries:
        if name == "fp16":
            end = offset + 2 * length
            if end > len(payload):
                raise DecodeError(f"truncated fp16 data for layer {lname!r}", offset)
            layers[lname] = np.frombuffer(payload, "<f2", length, offset).astype(np.float64)
        else:
            end = offset + 4 + length
            if end > len(payload):
                raise DecodeError(f"truncated int8 data for layer {lname!r}", offset)
            (scale,) = struct.unpack_from("<f", payload, offset)
            if not np.isfinite(scale) or scale <= 0:
                raise DecodeError(f"invalid int8 scale {scale} for layer {lname!r}", offset)
            q = np.frombuffer(payload, np.int8, length, offset + 4)
            layers[lname] = q.astype(np.float64) * float(scale)
        offset = end
    if offset != len(payload):
        raise DecodeError("trailing bytes after payload", offset)
    params = ModelParams(layers)
    if not params.is_finite():
        raise DecodeError("payload decodes to non-finite values", 1)
    return params


def _gunzip_single_member(payload: bytes, offset: int) -> bytes:
    # gzip.decompress tolerates zero padding and concatenated members; a payload must be exactly one
    inflater = zlib.decompressobj(wbits=31)
    try:
        raw = inflater.decompress(payload[offset:]) + inflater.flush()
    except zlib.error as exc:
        raise DecodeError(f"corrupt gzip stream: {exc}", offset) from None
    if not inflater.eof:
        raise DecodeError("truncated gzip stream", len(payload))
    if inflater.unused_data:
        raise DecodeError("trailing bytes after gzip stream", len(payload) - len(inflater.unused_data))
    return raw


def _deserialize_checked(buf: bytes, offset: int):
    params, end = deserialize(buf, offset)
    if not params.is_finite():
        raise DecodeError("payload decodes to non-finite values", offset)
    return params, end


def payload_size(n_params: int, layer_names: list[str], codec: str) -> int:
    """Exact payload size for the non-entropy codecs (gzip is data dependent)."""
    table = 1 + sum(1 + len(n.encode()) + 4 for n in layer_names)
    per_value = {"none": 4, "fp16": 2, "int8": 1}
    if codec not in per_value:
        raise EncodeError(f"size of {codec!r} payloads depends on the data")
    extra = 4 * len(layer_names) if codec == "int8" else 0
    return 1 + table + per_value[codec] * n_params + extra
