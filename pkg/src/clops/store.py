"""CTS1 series store: gzip-compressed JSON Lines, a header line followed by one record per line.

Arrays are base64-encoded little-endian float32 (bool masks as packed bits).
The header carries the format version, dataset kind, frequency, record count
and a SHA-256 checksum over the record lines.
"""
from __future__ import annotations

import base64
import gzip
import hashlib
import json
import os
import zlib
from pathlib import Path

import numpy as np

from .etl import TimeSeriesRecord

FORMAT = "CTS1"


class StoreError(IOError):
    pass


class ChecksumError(StoreError):
    pass


class VersionError(StoreError):
    pass


def _enc(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _dec(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["b64"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).astype(np.float32)


def _enc_mask(mask: np.ndarray) -> dict:
    return {"shape": list(mask.shape), "bits": base64.b64encode(np.packbits(mask.reshape(-1)).tobytes()).decode("ascii")}


def _dec_mask(obj: dict) -> np.ndarray:
    n = int(np.prod(obj["shape"]))
    bits = np.unpackbits(np.frombuffer(base64.b64decode(obj["bits"]), dtype=np.uint8))[:n]
    return bits.astype(bool).reshape(obj["shape"])


def record_to_json(r: TimeSeriesRecord) -> dict:
    return {
        "series_id": r.series_id,
        "top_level_attr": r.top_level_attr,
        "start": str(r.start),
        "targets": _enc(r.targets),
        "past_dynamic": _enc(r.past_dynamic),
        "static_real": _enc(r.static_real),
        "missing_mask": _enc_mask(r.missing_mask),
    }


def record_from_json(d: dict) -> TimeSeriesRecord:
    return TimeSeriesRecord(
        series_id=d["series_id"], top_level_attr=d["top_level_attr"], start=np.datetime64(d["start"], "s"),
        targets=_dec(d["targets"]), past_dynamic=_dec(d["past_dynamic"]),
        static_real=_dec(d["static_real"]), missing_mask=_dec_mask(d["missing_mask"]),
    )


def export_store(series: list[TimeSeriesRecord], path: str | Path, kind: str = "unknown",
                 meta: dict | None = None) -> None:
    """Write ``series`` atomically (via a .tmp file) in canonical series_id order."""
    lines = [json.dumps(record_to_json(r), sort_keys=True)
             for r in sorted(series, key=lambda r: r.series_id)]
    digest = hashlib.sha256()
    for line in lines:
        digest.update(line.encode() + b"\n")
    header = {"format": FORMAT, "kind": kind, "freq": "5min", "count": len(lines),
              "checksum": digest.hexdigest(), "meta": meta or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    # fixed mtime keeps output bytes reproducible
    with open(tmp, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for line in lines:
            fh.write(line.encode() + b"\n")
    os.replace(tmp, path)


def read_header(path: str | Path) -> dict:
    with gzip.open(path, "rt") as fh:
        return json.loads(fh.readline())


def import_store(path: str | Path) -> list[TimeSeriesRecord]:
    try:
        with gzip.open(path, "rb") as fh:
            content = fh.read()
    except (EOFError, OSError, zlib.error) as exc:
        raise ChecksumError(f"{path}: corrupt or truncated store ({exc})") from exc
    lines = content.split(b"\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: unreadable header") from exc
    if header.get("format") != FORMAT:
        raise VersionError(f"{path}: format {header.get('format')!r}, expected {FORMAT}")
    body = [ln for ln in lines[1:] if ln]
    digest = hashlib.sha256()
    for line in body:
        digest.update(line + b"\n")
    if digest.hexdigest() != header["checksum"] or len(body) != header["count"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    return [record_from_json(json.loads(line)) for line in body]
