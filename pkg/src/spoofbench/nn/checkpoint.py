"""Named-tensor parameter sets and their binary checkpoint format.

File layout (all integers little-endian):
    magic "CKPT" | u32 version | str model-kind | str config-digest | u64 step
    | u32 record-count | records...
Each record is (str name, u32 ndim, u32 dims..., float32 data).  Strings are
u32 byte length + UTF-8.  Buffers (running statistics, loss curves) are
stored as records whose names carry a "buffer/" prefix.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

MAGIC = b"CKPT"
VERSION = 1
_BUFFER_PREFIX = "buffer/"


@dataclass
class ParameterSet:
    kind: str
    config_digest: str
    step: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.params) & set(self.buffers)
        if overlap:
            raise ValueError(f"names used as both parameter and buffer: {sorted(overlap)}")

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def config_digest(cfg) -> str:
    """Stable short digest of a config dataclass / dict."""
    if hasattr(cfg, "__dataclass_fields__"):
        payload = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    else:
        payload = dict(cfg)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_record(fh, name: str, arr: np.ndarray):
    _write_str(fh, name)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    name = _read_str(fh)
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
    return name, data


def save_checkpoint(path, ps: ParameterSet) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, ps.kind)
        _write_str(fh, ps.config_digest)
        fh.write(struct.pack("<Q", ps.step))
        names = list(ps.params) + [_BUFFER_PREFIX + n for n in ps.buffers]
        fh.write(struct.pack("<I", len(names)))
        for name in ps.params:
            _write_record(fh, name, ps.params[name].data)
        for name in ps.buffers:
            _write_record(fh, _BUFFER_PREFIX + name, ps.buffers[name])


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(fh)
        digest = _read_str(fh)
        (step,) = struct.unpack("<Q", fh.read(8))
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, Tensor] = {}
        buffers: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, data = _read_record(fh)
            if name.startswith(_BUFFER_PREFIX):
                buffers[name[len(_BUFFER_PREFIX):]] = data
            else:
                params[name] = Tensor(data, requires_grad=True)
    return ParameterSet(kind=kind, config_digest=digest, step=step,
                        params=params, buffers=buffers)
