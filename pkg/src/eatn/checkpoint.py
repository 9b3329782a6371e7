"""``.eatn`` checkpoint files.

Layout (all integers little-endian)::

    b"EATN"  u16 version
    u32 spec_len, spec_len bytes of UTF-8 JSON (the ModelSpec)
    u32 n_tensors
    n_tensors x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dims,
                  prod(dims) x f32 row-major payload }
    u32 CRC32 of every byte between the version field and the checksum

Tensors are written in the model's canonical parameter order, so
``save(load(save(m)))`` is byte-identical to ``save(m)``.
"""
import json
import struct
import zlib

import numpy as np

from .errors import CorruptionError
from .model import EATransformer, ModelSpec, param_shapes
from .tensor import Tensor

MAGIC = b"EATN"
VERSION = 1


def checkpoint_bytes(model):
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(spec)), spec, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return MAGIC + struct.pack("<H", VERSION) + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(data):
    """Return ``(spec_dict, {name: float64 array})`` after verifying magic and CRC."""
    if len(data) < 10 or data[:4] != MAGIC:
        raise CorruptionError("not an eatn checkpoint (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version}")
    body, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint CRC mismatch")
    r = _Reader(body)
    try:
        spec = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"checkpoint spec header unreadable: {e}") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(body):
        raise CorruptionError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return spec, tensors


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorruptionError(f"cannot read checkpoint {path}: {e}") from None
    spec_dict, tensors = parse_checkpoint(data)
    try:
        spec = ModelSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as e:
        raise CorruptionError(f"checkpoint spec invalid: {e}") from None
    expected = param_shapes(spec)
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if unknown or missing:
        raise CorruptionError(f"checkpoint tensors do not match its spec: unknown {unknown}, "
                              f"missing {missing}")
    params = {n: Tensor(tensors[n], requires_grad=True, name=n) for n in expected}
    return EATransformer(spec, params)
