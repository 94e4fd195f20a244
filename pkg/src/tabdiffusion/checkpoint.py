"""Binary checkpoint files.

Layout (little-endian):

    magic  b"DFSN"
    version u32
    records, each:
        name_len u32, name bytes (utf-8)
        rank u32, dims u64[rank]
        payload f64[prod(dims)]

Metadata travels as one final record named ``meta:<json>`` with rank 1,
dims [0] and an empty payload. It must be present, which also catches files
truncated on a record boundary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, model_from_descriptor
from .errors import CheckpointError
from .schedule import NoiseSchedule, linear_schedule

MAGIC = b"DFSN"
VERSION = 1
META_PREFIX = "meta:"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in ckpt.tensors.items():
        if name.startswith(META_PREFIX):
            raise CheckpointError(f"tensor name {name!r} uses the reserved prefix")
        parts.append(_record(name, arr))
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":"))
    parts.append(_record(META_PREFIX + meta, np.zeros(0)))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    meta = None
    index = 0
    while r.pos < len(buf):
        label = f"record {index}"
        (nlen,) = struct.unpack("<I", r.take(4, f"{label} name length"))
        try:
            name = r.take(nlen, f"{label} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{label}: name is not valid utf-8") from None
        label = f"record {index} ({name[:40]!r})"
        (rank,) = struct.unpack("<I", r.take(4, f"{label} rank"))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{label} dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * count, f"{label} payload")
        if name.startswith(META_PREFIX):
            try:
                meta = json.loads(name[len(META_PREFIX):])
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{label}: bad metadata: {exc}") from None
            if r.pos != len(buf):
                raise CheckpointError(f"{label}: trailing bytes after metadata record")
        else:
            if name in tensors:
                raise CheckpointError(f"{label}: duplicate tensor name")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        index += 1
    if meta is None:
        raise CheckpointError(f"truncated: metadata record missing after record {index - 1}")
    return Checkpoint(tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return decode(buf)


# Model-level helpers.

def model_checkpoint(model: Denoiser, sched: NoiseSchedule, extra: dict | None = None,
                     arrays: dict | None = None) -> Checkpoint:
    tensors = {f"param:{name}": p.data for name, p in model.params.items()}
    for key, value in (arrays or {}).items():
        tensors[key] = np.asarray(value, dtype=np.float64)
    meta = {"type": "denoiser", "model": model.descriptor(), "schedule": sched.params()}
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def _restore_params(params, tensors: dict):
    for name in params:
        key = f"param:{name}"
        if key not in tensors:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
        params.assign(name, tensors[key])


def restore_model(ckpt: Checkpoint):
    """Rebuild (model, schedule) from a denoiser checkpoint."""
    if ckpt.meta.get("type") != "denoiser":
        raise CheckpointError(f"expected a denoiser checkpoint, got {ckpt.meta.get('type')!r}")
    model = model_from_descriptor(ckpt.meta["model"])
    _restore_params(model.params, ckpt.tensors)
    sp = ckpt.meta["schedule"]
    return model, linear_schedule(sp["T"], sp["beta_start"], sp["beta_end"])


def classifier_checkpoint(clf, sched: NoiseSchedule | None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param:{name}": p.data for name, p in clf.params.items()}
    meta = {"type": "classifier", "model": clf.descriptor(),
            "schedule": None if sched is None else sched.params()}
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def restore_classifier(ckpt: Checkpoint):
    from .guidance import GuidanceClassifier

    if ckpt.meta.get("type") != "classifier":
        raise CheckpointError(f"expected a classifier checkpoint, got {ckpt.meta.get('type')!r}")
    d = dict(ckpt.meta["model"])
    clf = GuidanceClassifier(d.pop("feature_dim"), **d)
    _restore_params(clf.params, ckpt.tensors)
    return clf
