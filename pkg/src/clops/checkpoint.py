"""CLOPS1 binary checkpoints.

Layout (all integers little-endian u32)::

    b"CLOPS1" | version byte | len | JSON config | records... | CRC32

Each record is ``name_len, name (utf-8), rank, dims..., float32 values``.
Model parameters come first under their module path; optimizer moments, when
present, follow as ``opt.m.<name>`` and ``opt.v.<name>``. The CRC covers every
byte before it.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .models import ForecastModel, build_model

MAGIC = b"CLOPS1"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class CRCMismatchError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name, plus step and skip counters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def meta(self) -> dict:
        return {"step": self.step, "skipped": self.skipped, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


@dataclass
class Checkpoint:
    model: ForecastModel
    config: ModelConfig
    optimizer: OptimizerState | None
    meta: dict

    @property
    def inference_only(self) -> bool:
        return self.optimizer is None


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(model: ForecastModel, optimizer: OptimizerState | None = None,
                      meta: dict | None = None) -> bytes:
    header = {
        "model": model.config.to_dict(),
        "optimizer": optimizer.meta() if optimizer is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, bytes([VERSION]), _U32.pack(len(blob)), blob]
    names = []
    for name, p in model.named_parameters():
        parts.append(_record(name, p.data))
        names.append(name)
    if optimizer is not None:
        for prefix, moments in (("opt.m.", optimizer.m), ("opt.v.", optimizer.v)):
            for name in names:
                if name in moments:
                    parts.append(_record(prefix + name, moments[name]))
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: ForecastModel, path, optimizer: OptimizerState | None = None,
                    meta: dict | None = None) -> Path:
    """Write atomically: bytes go to ``<path>.tmp`` first, then replace ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, optimizer, meta))
    os.replace(tmp, path)
    return path


def decode_checkpoint(data: bytes) -> tuple[dict, dict]:
    """Verify and split raw bytes into (header, {name: float32 array})."""
    if len(data) < len(MAGIC) + 1 + 4 + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a CLOPS1 checkpoint")
    (crc,) = _U32.unpack_from(data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CRCMismatchError("checkpoint CRC32 mismatch; file is corrupt")
    version = data[len(MAGIC)]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    off = len(MAGIC) + 1
    (n,) = _U32.unpack_from(data, off)
    off += 4
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    end = len(data) - 4
    records = {}
    while off < end:
        (n,) = _U32.unpack_from(data, off)
        name = data[off + 4:off + 4 + n].decode("utf-8")
        off += 4 + n
        (rank,) = _U32.unpack_from(data, off)
        dims = struct.unpack_from(f"<{rank}I", data, off + 4)
        off += 4 + 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        records[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    if off != end:
        raise CheckpointError("trailing bytes after the last record")
    return header, records


def load_checkpoint(path, seed: int = 0) -> Checkpoint:
    header, records = decode_checkpoint(Path(path).read_bytes())
    config = ModelConfig(**header["model"])
    model, _ = build_model(config, seed=seed)
    params = {k: v for k, v in records.items() if not k.startswith("opt.")}
    model.load_state_dict(params)
    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = OptimizerState(
            m={k[len("opt.m."):]: v for k, v in records.items() if k.startswith("opt.m.")},
            v={k[len("opt.v."):]: v for k, v in records.items() if k.startswith("opt.v.")},
            step=o["step"], skipped=o["skipped"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        )
    return Checkpoint(model, config, opt, header.get("meta", {}))
