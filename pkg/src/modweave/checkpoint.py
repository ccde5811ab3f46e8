"""Binary checkpoints.

Layout, all little-endian:

    "OWCK" | u32 version | u32 stage | u32 json_len | config json
    | u32 record_count | records...

    record: u32 name_len | name utf-8 | u32 rank | u32 * rank extents
            | float32 * prod(extents)

Parameters are stored as float32 regardless of the working dtype.
Trainer and optimizer state ride along as extra records under the
"state." and "opt." prefixes; mask decoders are rebuilt from the seed
and never stored.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"OWCK"
VERSION = 1
STAGES = (1, 2, 3)


def write_checkpoint(path, stage: int, config: dict, records) -> None:
    """Write named float32 arrays. `records` is an iterable of (name, array)."""
    if stage not in STAGES:
        raise CheckpointError(f"stage tag must be one of {STAGES}, got {stage}")
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    items = []
    seen = set()
    for name, arr in records:
        if name in seen:
            raise CheckpointError(f"duplicate record name {name!r}")
        seen.add(name)
        items.append((name, np.ascontiguousarray(arr, dtype="<f4")))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, stage, len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _take(buf: bytes, offset: int, count: int, what: str):
    end = offset + count
    if end > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf[offset:end], end


def read_checkpoint(path):
    """Returns (stage, config dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        buf = fh.read()
    head, off = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {head!r}")
    raw, off = _take(buf, off, 12, "header")
    version, stage, json_len = struct.unpack("<III", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if stage not in STAGES:
        raise CheckpointError(f"bad stage tag {stage}")
    raw, off = _take(buf, off, json_len, "config")
    try:
        config = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint config: {exc}") from exc
    raw, off = _take(buf, off, 4, "record count")
    (count,) = struct.unpack("<I", raw)
    records = {}
    for i in range(count):
        raw, off = _take(buf, off, 4, f"record {i} name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, name_len, f"record {i} name")
        name = raw.decode("utf-8")
        if name in records:
            raise CheckpointError(f"duplicate record name {name!r}")
        raw, off = _take(buf, off, 4, f"record {name!r} rank")
        (rank,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 4 * rank, f"record {name!r} extents")
        shape = struct.unpack(f"<{rank}I", raw) if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 4 * size, f"record {name!r} data")
        records[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last record")
    return stage, config, records


def bundle_records(bundle):
    """Model parameters as checkpoint records, decoders excluded."""
    return [(name, p.data)
            for name, p in bundle.named_parameters(include_decoders=False)]


def restore_bundle(bundle, records: dict) -> None:
    """Load parameters in place; unknown or missing names fail loudly."""
    params = dict(bundle.named_parameters(include_decoders=False))
    for name in records:
        if name.startswith(("state.", "opt.")):
            continue
        if name not in params:
            raise CheckpointError(f"checkpoint record {name!r} matches no parameter")
    for name, p in params.items():
        if name not in records:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = records[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} != "
                f"model shape {tuple(p.data.shape)}")
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


def _flatten(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for key in value:
            _flatten(f"{prefix}{key}.", value[key], out)
    else:
        out[prefix[:-1]] = value


# Only the blocks that determine parameter shapes; budgets and paths may
# legitimately differ between the saving run and the resuming run.
_COMPAT_PREFIXES = ("dims.", "modalities.")


def check_config_compatible(saved: dict, current: dict) -> None:
    a, b = {}, {}
    _flatten("", saved, a)
    _flatten("", current, b)
    for key in sorted(set(a) | set(b)):
        if not key.startswith(_COMPAT_PREFIXES):
            continue
        if key not in a:
            raise CheckpointError(f"config mismatch: {key} set now, absent in checkpoint")
        if key not in b:
            raise CheckpointError(f"config mismatch: {key} in checkpoint, absent now")
        if a[key] != b[key]:
            raise CheckpointError(
                f"config mismatch at {key}: checkpoint has {a[key]!r}, run has {b[key]!r}")
