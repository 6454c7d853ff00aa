"""Model checkpoint container.

Layout (little-endian)::

    b"DACK"                      magic
    u16                          format version (1)
    u32 n, n bytes               NetworkConfig as UTF-8 JSON (sorted keys)
    u32                          entry count
    per entry:
      u16 n, n bytes             UTF-8 name
      u8                         kind: 0 trainable parameter, 1 BN running statistic
      u8 r, r x u32              shape
      prod(shape) x f32          values, C order

Running statistics are stored as ``<bn name>.running_mean`` / ``.running_var``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .backbone import ModelParams, NetworkConfig, build_network
from .errors import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"DACK"
VERSION = 1


def _entries(params: ModelParams):
    for name, t in params.named_tensors().items():
        yield name, 0, t.data
    for name, st in params.named_bn_states().items():
        yield f"{name}.running_mean", 1, st.running_mean
        yield f"{name}.running_var", 1, st.running_var


def encode_checkpoint(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(params.cfg.to_dict(), sort_keys=True).encode()
    entries = list(_entries(params))
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(cfg)) + cfg + struct.pack("<I", len(entries)))
    for name, kind, arr in entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", kind, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    version, n = r.unpack("<HI")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported")
    cfg = NetworkConfig.from_dict(json.loads(r.take(n).decode()))
    params = build_network(cfg, initialize=False)
    tensors = params.named_tensors()
    states = params.named_bn_states()
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        arr = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").astype(np.float32).reshape(shape)
        if kind == 0:
            if name not in tensors or tensors[name].shape != shape:
                raise FormatError(f"checkpoint entry {name}{list(shape)} does not fit the stored config")
            tensors[name].data = arr
        else:
            bn, stat = name.rsplit(".", 1)
            if bn not in states or stat not in ("running_mean", "running_var"):
                raise FormatError(f"unknown running statistic {name}")
            setattr(states[bn], stat, arr)
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())
