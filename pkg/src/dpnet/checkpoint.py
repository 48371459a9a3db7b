"""Bit-exact checkpoint files for model parameters and optimizer state.

Layout, all integers little-endian::

    magic        4 bytes   b"DPNC"
    version      u16       currently 1
    digest       32 bytes  SHA-256 of the config text below
    config_len   u32
    config       config_len bytes, UTF-8 canonical ``key=value`` lines
    n_entries    u32
    entries      n_entries times:
        name_len  u16
        name      name_len bytes, UTF-8
        dtype     u8        1 = float64, 2 = float32, 3 = int64
        rank      u8
        dims      rank x u32
        payload   prod(dims) * itemsize bytes, little-endian, row-major

Entry names: ``param/<name>``, ``buffer/<name>``, ``adam/m/<name>``,
``adam/v/<name>``, ``adam/t``, ``adam/hyper`` (lr, beta1, beta2, eps), and
``train/<key>`` for loop bookkeeping.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .optim import AdamState
from .tensor import Rng

MAGIC = b"DPNC"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_TAGS = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


def encode_entry(name: str, array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    tag = _TAGS[arr.dtype]
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def dumps(config: ModelConfig, entries: dict) -> bytes:
    text = config.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<H", VERSION), config.digest(),
           struct.pack("<I", len(text)), text, struct.pack("<I", len(entries))]
    out.extend(encode_entry(k, v) for k, v in entries.items())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def loads(data: bytes):
    """Parse checkpoint bytes into ``(config, entries)``."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(32, "config digest")
    (clen,) = struct.unpack("<I", r.take(4, "config length"))
    text = r.take(clen, "config text").decode("utf-8")
    config = ModelConfig.from_text(text)
    if config.digest() != digest or config.to_text() != text:
        raise CheckpointError("config digest mismatch")
    (count,) = struct.unpack("<I", r.take(4, "entry count"))
    entries = {}
    for i in range(count):
        label = f"entry #{i}"
        (nlen,) = struct.unpack("<H", r.take(2, f"{label} name length"))
        name = r.take(nlen, f"{label} name").decode("utf-8")
        label = f"entry {name!r}"
        tag, rank = struct.unpack("<BB", r.take(2, f"{label} header"))
        if tag not in _DTYPES:
            raise CheckpointError(f"{label}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{label} dims"))
        dt = _DTYPES[tag]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"{label} payload")
        entries[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last entry")
    return config, entries


def collect(model: Model, state: AdamState | None = None, extra: dict | None = None) -> dict:
    entries = {f"param/{k}": v for k, v in model.named_parameters().items()}
    entries.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    if state is not None:
        entries["adam/t"] = np.array(state.t, dtype=np.int64)
        entries["adam/hyper"] = np.array([state.lr, state.beta1, state.beta2, state.eps])
        for k in model.named_parameters():
            if k in state.m:
                entries[f"adam/m/{k}"] = state.m[k]
                entries[f"adam/v/{k}"] = state.v[k]
    for k, v in (extra or {}).items():
        arr = np.asarray(v)
        entries[f"train/{k}"] = arr.astype(np.int64 if arr.dtype.kind in "iub" else np.float64)
    return entries


def save(path, model: Model, state: AdamState | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    data = dumps(model.config, collect(model, state, extra))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def restore(config: ModelConfig, entries: dict):
    model = Model(config, Rng(0))
    targets = {f"param/{k}": v for k, v in model.named_parameters().items()}
    targets.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    for name, dst in targets.items():
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing {name!r}")
        src = entries[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name!r} has shape {src.shape}, model expects {dst.shape}")
        dst[...] = src
    state = None
    if "adam/t" in entries:
        lr, b1, b2, eps = (float(v) for v in entries["adam/hyper"])
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=int(entries["adam/t"]))
        for k in model.named_parameters():
            if f"adam/m/{k}" in entries:
                state.m[k] = entries[f"adam/m/{k}"].copy()
                state.v[k] = entries[f"adam/v/{k}"].copy()
    extra = {k[len("train/"):]: (v.item() if v.ndim == 0 else v)
             for k, v in entries.items() if k.startswith("train/")}
    return model, state, extra


def load(path):
    """``(model, adam_state or None, extra dict)`` from a checkpoint file."""
    config, entries = loads(Path(path).read_bytes())
    return restore(config, entries)
