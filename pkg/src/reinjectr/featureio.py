"""Binary containers and table exports.

PRFD (feature dump), little-endian, no padding::

    magic      4s   b"PRFD"
    version    u16  1
    layers     u16
    tokens     u32
    width      u32
    dtype      u8   1 = float32, 2 = float64
    timestep   f32
    flags      u8   bit 0: label block present
    payload    layers * tokens * width values, layer-major, row-major
    labels     tokens bytes (category index), only if flag bit 0

PRRM (rotation map)::

    magic "PRRM", version u16, origin u16, count u16,
    then per entry: target u16, d u32, d*d float32 (row-major)

PRTM (toy model checkpoint)::

    magic "PRTM", version u16, metadata length u32, metadata (UTF-8 JSON),
    then per parameter in metadata order: its float64 payload
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .corpus import CATEGORIES
from .errors import CorruptDump, InvalidInput, IoError, UnsupportedVersion
from .metrics import DriftReport
from .mmdit import MMDiTConfig, ToyMMDiT
from .probe import RecoverabilityCurve
from .reinject import CostReport, RotationMap
from .stack import FeatureStack

PRFD_MAGIC = b"PRFD"
PRRM_MAGIC = b"PRRM"
PRTM_MAGIC = b"PRTM"
PRFD_VERSION = 1
PRRM_VERSION = 1
PRTM_VERSION = 1

_PRFD_HEADER = struct.Struct("<4sHHIIBfB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TAGS = {"f32": 1, "f64": 2}
FLAG_LABELS = 1


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def encode_dump(stack: FeatureStack, labels=None, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPE_TAGS:
        raise InvalidInput(f"dtype must be one of {sorted(_DTYPE_TAGS)}")
    tag = _DTYPE_TAGS[dtype]
    flags = 0
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (stack.n_tokens,):
            raise InvalidInput(f"need {stack.n_tokens} labels, got {labels.shape}")
        if np.any((labels < 0) | (labels >= len(CATEGORIES))):
            raise InvalidInput("label outside the category range")
        flags |= FLAG_LABELS
    header = _PRFD_HEADER.pack(
        PRFD_MAGIC, PRFD_VERSION, stack.n_layers, stack.n_tokens, stack.width, tag, stack.timestep, flags
    )
    payload = np.stack(stack.layers).astype(_DTYPES[tag], copy=False).tobytes(order="C")
    tail = labels.astype(np.uint8).tobytes() if labels is not None else b""
    return header + payload + tail


def decode_dump(data: bytes) -> Tuple[FeatureStack, Optional[np.ndarray]]:
    if len(data) < _PRFD_HEADER.size:
        raise CorruptDump(f"{len(data)} bytes is shorter than the PRFD header")
    magic, version, layers, tokens, width, tag, timestep, flags = _PRFD_HEADER.unpack_from(data)
    if magic != PRFD_MAGIC:
        raise CorruptDump(f"bad magic {magic!r}")
    if version != PRFD_VERSION:
        raise UnsupportedVersion(f"PRFD version {version} (reader knows {PRFD_VERSION})")
    if tag not in _DTYPES:
        raise CorruptDump(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = layers * tokens * width
    start = _PRFD_HEADER.size
    end = start + count * dt.itemsize
    expected = end + (tokens if flags & FLAG_LABELS else 0)
    if len(data) != expected:
        raise CorruptDump(f"expected {expected} bytes, found {len(data)}")
    if layers == 0:
        raise CorruptDump("dump declares zero layers")
    values = np.frombuffer(data, dtype=dt, count=count, offset=start).astype(np.float64)
    values = values.reshape(layers, tokens, width)
    stack = FeatureStack(layers=tuple(values[l].copy() for l in range(layers)), timestep=float(timestep))
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(data, dtype=np.uint8, count=tokens, offset=end).astype(np.int64)
        if np.any(labels >= len(CATEGORIES)):
            raise CorruptDump("label byte outside the category range")
    return stack, labels


def write_dump(stack: FeatureStack, path, labels=None, dtype: str = "f64") -> None:
    _write_bytes(path, encode_dump(stack, labels, dtype))


def read_dump(path) -> Tuple[FeatureStack, Optional[np.ndarray]]:
    return decode_dump(_read_bytes(path))


def encode_rotation_map(rmap: RotationMap) -> bytes:
    out = [struct.pack("<4sHHH", PRRM_MAGIC, PRRM_VERSION, rmap.origin_layer, len(rmap.entries))]
    for target, r in rmap.entries.items():
        out.append(struct.pack("<HI", target, r.shape[0]))
        out.append(np.asarray(r, dtype="<f4").tobytes(order="C"))
    return b"".join(out)


def decode_rotation_map(data: bytes) -> RotationMap:
    """Parse a PRRM blob; entries are float32 on disk and widened to float64."""
    if len(data) < 10:
        raise CorruptDump("PRRM header truncated")
    magic, version, origin, count = struct.unpack_from("<4sHHH", data)
    if magic != PRRM_MAGIC:
        raise CorruptDump(f"bad magic {magic!r}")
    if version != PRRM_VERSION:
        raise UnsupportedVersion(f"PRRM version {version} (reader knows {PRRM_VERSION})")
    pos, entries = 10, {}
    for _ in range(count):
        if pos + 6 > len(data):
            raise CorruptDump("PRRM entry header truncated")
        target, d = struct.unpack_from("<HI", data, pos)
        pos += 6
        nbytes = 4 * d * d
        if pos + nbytes > len(data):
            raise CorruptDump("PRRM matrix payload truncated")
        entries[target] = np.frombuffer(data, dtype="<f4", count=d * d, offset=pos).astype(np.float64).reshape(d, d)
        pos += nbytes
    if pos != len(data):
        raise CorruptDump(f"{len(data) - pos} trailing bytes after PRRM entries")
    width = max((r.shape[0] for r in entries.values()), default=1)
    try:
        return RotationMap(origin, entries, ortho_tol=float32_ortho_tol(width))
    except InvalidInput as exc:
        raise CorruptDump(str(exc)) from exc


def float32_ortho_tol(d: int) -> float:
    """Orthogonality tolerance after float32 rounding (error grows like sqrt(d))."""
    return 1e-6 * max(1.0, np.sqrt(d) / 16)


def write_rotation_map(rmap: RotationMap, path) -> None:
    _write_bytes(path, encode_rotation_map(rmap))


def read_rotation_map(path) -> RotationMap:
    return decode_rotation_map(_read_bytes(path))


def save_model(model: ToyMMDiT, path, extra: Optional[dict] = None) -> None:
    names = sorted(model.params)
    meta = {
        "config": asdict(model.config),
        "params": [[k, list(model.params[k].shape)] for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [struct.pack("<4sHI", PRTM_MAGIC, PRTM_VERSION, len(blob)), blob]
    parts += [np.asarray(model.params[k], dtype="<f8").tobytes(order="C") for k in names]
    _write_bytes(path, b"".join(parts))


def load_model(path) -> Tuple[ToyMMDiT, dict]:
    data = _read_bytes(path)
    if len(data) < 10:
        raise CorruptDump("PRTM header truncated")
    magic, version, size = struct.unpack_from("<4sHI", data)
    if magic != PRTM_MAGIC:
        raise CorruptDump(f"bad magic {magic!r}")
    if version != PRTM_VERSION:
        raise UnsupportedVersion(f"PRTM version {version} (reader knows {PRTM_VERSION})")
    try:
        meta = json.loads(data[10:10 + size].decode())
        config = MMDiTConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptDump(f"bad PRTM metadata: {exc}") from exc
    pos, params = 10 + size, {}
    for name, shape in meta["params"]:
        count = int(np.prod(shape))
        if pos + 8 * count > len(data):
            raise CorruptDump(f"parameter {name} truncated")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(data):
        raise CorruptDump("trailing bytes after parameters")
    return ToyMMDiT(config, params), meta.get("extra", {})


# ---------------------------------------------------------------- tables


def _fmt(x) -> str:
    return format(float(x), ".9g")


def _rows(report, fmt: str):
    if isinstance(report, DriftReport):
        if fmt == "csv":
            rows = [["layer", "token", "pc1", "pc2"]]
            for layer, coords in zip(report.layer_ids, report.coords):
                for tok, c in enumerate(coords):
                    pc2 = c[1] if c.shape[0] > 1 else 0.0
                    rows.append([str(layer), str(tok), _fmt(c[0]), _fmt(pc2)])
            return rows
        return report.to_dict()
    if isinstance(report, RecoverabilityCurve):
        if fmt == "csv":
            rows = [["layer", "category", "accuracy", "support"]]
            total = sum(report.support.values())
            for layer, acc, per in zip(report.layer_ids, report.overall, report.per_category):
                rows.append([str(layer), "overall", _fmt(acc), str(total)])
                for name in CATEGORIES:
                    if name in per:
                        rows.append([str(layer), name, _fmt(per[name]), str(report.support[name])])
            return rows
        return report.to_dict()
    if isinstance(report, CostReport):
        if fmt == "csv":
            d = report.to_dict()["per_target_block"]
            rows = [["component", "flops", "memory_bytes"]]
            rows.append(["plain_add", _fmt(d["flops"]["plain_add"]), str(d["memory_bytes"]["origin_copy"])])
            rows.append(["anchoring", _fmt(d["flops"]["anchoring"]), str(d["memory_bytes"]["anchoring_buffers"])])
            rows.append(["rotation", _fmt(d["flops"]["rotation"]), str(d["memory_bytes"]["rotation_buffer"])])
            rows.append(["total", _fmt(d["flops"]["total"]), str(d["memory_bytes"]["total"])])
            return rows
        return report.to_dict()
    raise InvalidInput(f"cannot export {type(report).__name__}")


def _round_floats(obj):
    if isinstance(obj, float):
        return float(_fmt(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def _check_report(report) -> None:
    if isinstance(report, RecoverabilityCurve):
        if len(report.layer_ids) == 0:
            raise InvalidInput("empty curve")
        values = report.overall
    elif isinstance(report, DriftReport):
        if len(report.layer_ids) == 0:
            raise InvalidInput("empty drift report")
        values = np.concatenate([report.scores] + [c.ravel() for c in report.coords])
    elif isinstance(report, CostReport):
        values = np.array([report.total_flops, report.block_flops])
    else:
        raise InvalidInput(f"cannot export {type(report).__name__}")
    if not np.all(np.isfinite(values)):
        raise InvalidInput("report contains non-finite values")


def format_table(report, fmt: str = "csv") -> str:
    if fmt not in ("csv", "json"):
        raise InvalidInput(f"format must be csv or json, got {fmt!r}")
    _check_report(report)
    rows = _rows(report, fmt)
    if fmt == "json":
        return json.dumps(_round_floats(rows), indent=2) + "\n"
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def export_table(report, fmt: str, path) -> None:
    try:
        Path(path).write_text(format_table(report, fmt))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
