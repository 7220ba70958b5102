"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic      b"LSHD"
    version    uint32
    hdr_len    uint32
    header     UTF-8 JSON, ``hdr_len`` bytes (sorted keys)
    blob       float32 little-endian parameters, concatenated

The header holds the bundle kind, architecture descriptors, schedule,
metadata, a SHA-256 of the blob and an index table of
``{name, shape, offset, count}`` entries into the blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .diffusion import make_schedule
from .models import LatentStats, LdmBundle, PixelDmBundle
from .nets import build

MAGIC = b"LSHD"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} does not match supported version {expected}")
        self.found = found
        self.expected = expected


def _tensors(bundle) -> dict:
    out = {}
    for mname, module in bundle.modules().items():
        for k, v in module.state_dict().items():
            out[f"{mname}.{k}"] = v
    if isinstance(bundle, LdmBundle):
        out["latent_stats.mean"] = bundle.latent_stats.mean
        out["latent_stats.std"] = bundle.latent_stats.std
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def to_bytes(bundle) -> bytes:
    tensors = _tensors(bundle)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    header = {
        "kind": bundle.kind,
        "arch": {k: {"class": type(m).__name__, "params": m.arch} for k, m in bundle.modules().items()},
        "schedule": bundle.schedule.descriptor(),
        "meta": _jsonable(bundle.meta),
        "index": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
    }
    if isinstance(bundle, LdmBundle):
        header["latent_stats_count"] = bundle.latent_stats.count
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hdr)) + hdr + blob


def save_checkpoint(bundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(bundle))
    os.replace(tmp, path)
    return path


def from_bytes(raw: bytes):
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    if len(raw) < 12 + hlen:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable header: {e}") from None
    blob = raw[12 + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise CorruptCheckpointError(
            f"blob is {len(blob)} bytes, header declares {header['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CorruptCheckpointError("blob checksum mismatch")
    tensors = {}
    for e in header["index"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    modules = {}
    for mname, spec in header["arch"].items():
        module = build(spec["class"], spec["params"])
        prefix = mname + "."
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd, strict=True)
        modules[mname] = module
    sch = header["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_start"], sch["beta_end"], sch["kind"])
    if header["kind"] == "ldm":
        stats = LatentStats(tensors["latent_stats.mean"], tensors["latent_stats.std"],
                            header.get("latent_stats_count", 0))
        bundle = LdmBundle(modules["encoder"], modules["decoder"], modules["denoiser"],
                           schedule, stats, header["meta"])
    elif header["kind"] == "pixel":
        bundle = PixelDmBundle(modules["denoiser"], schedule, header["meta"])
    else:
        raise CorruptCheckpointError(f"unknown bundle kind {header['kind']!r}")
    return bundle.freeze()


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
