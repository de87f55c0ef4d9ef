"""Versioned binary checkpoints: model config, params, BN buffers, EMA.

Layout (little-endian): magic "SLCK", u32 version (1), u32 JSON length +
UTF-8 model config, then three blob sections (params, buffers, optional
EMA shadows). Each section is u32 count followed by entries of u16 name
length + name, u8 ndim, u32 dims, raw float32 data. Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .backbone import ModelConfig, SLNet, build_model
from .pointfile import FormatError
from .train import Ema

MAGIC = b"SLCK"
VERSION = 1


def _write_blob(f, name: str, arr: np.ndarray) -> None:
    if arr.dtype != np.float32:
        raise ValueError(f"checkpoints store float32 blobs; {name} is {arr.dtype}")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(raw: bytes, off: int) -> tuple[str, np.ndarray, int]:
    (name_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    name = raw[off:off + name_len].decode("utf-8")
    off += name_len
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = off + 4 * count
    if end > len(raw):
        raise FormatError(
            f"truncated blob {name!r}: expected {end} bytes, file has {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return name, arr.reshape(shape).copy(), end


def save_checkpoint(path, model: SLNet, ema: Ema | None = None) -> None:
    if model.dtype != np.float32:
        raise ValueError("only float32 models are checkpointed")
    config_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(config_json)))
        f.write(config_json)
        named = model.named_params()
        f.write(struct.pack("<I", len(named)))
        for name, p in named:
            _write_blob(f, name, p.value.data)
        buffers = model.named_buffers()
        f.write(struct.pack("<I", len(buffers)))
        for name, arr in buffers:
            _write_blob(f, name, arr)
        if ema is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<I", len(named)))
            for (name, _), shadow in zip(named, ema.shadow):
                _write_blob(f, name, shadow)


def load_checkpoint(path) -> tuple[ModelConfig, dict, dict, dict | None]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"truncated checkpoint: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    (config_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    try:
        config = ModelConfig.from_dict(json.loads(raw[off:off + config_len]))
    except (json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"bad config JSON at offset {off}: {e}") from e
    off += config_len

    def read_section(off):
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = {}
        for _ in range(count):
            name, arr, off = _read_blob(raw, off)
            out[name] = arr
        return out, off

    params, off = read_section(off)
    buffers, off = read_section(off)
    (has_ema,) = struct.unpack_from("<B", raw, off)
    off += 1
    ema = None
    if has_ema:
        ema, off = read_section(off)
    if off != len(raw):
        raise FormatError(f"trailing bytes after offset {off}")
    return config, params, buffers, ema


def load_model(path, use_ema: bool = False) -> SLNet:
    """Rebuild the model from a checkpoint; optionally load EMA weights."""
    config, params, buffers, ema = load_checkpoint(path)
    model = build_model(config, seed=0)
    source = ema if (use_ema and ema is not None) else params
    named = dict(model.named_params())
    if set(named) != set(params):
        raise FormatError("checkpoint parameter names do not match the config")
    for name, p in named.items():
        arr = source[name]
        if arr.shape != p.shape:
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.value.data[...] = arr
    model_buffers = dict(model.named_buffers())
    if set(model_buffers) != set(buffers):
        raise FormatError("checkpoint buffer names do not match the config")
    for name, arr in buffers.items():
        model_buffers[name][...] = arr
    model.eval()
    return model
