"""``.atnm`` attention-map files and ``.pgm`` heatmaps.

``.atnm`` layout (little-endian)::

    b"ATNM"  u16 version  u8 stage  u8 kind
    u32 layer  u32 N_q  u32 N_k  u32 K
    N_q * N_k * K x f32, row-major over [N_q, N_k, K]

``stage`` is 0/1/2 for pre_conv/post_conv/post_softmax; ``kind`` is 0/1/2 for
encoder/decoder_self/encoder_decoder.  ``layer`` numbers attention instances
in forward order (encoder blocks first, then decoder self/cross alternating).
"""
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, InputError

MAGIC = b"ATNM"
VERSION = 1
STAGES = ("pre_conv", "post_conv", "post_softmax")
KINDS = ("encoder", "decoder_self", "encoder_decoder")
_HEADER = struct.Struct("<4sHBBIIII")


@dataclass
class AttnMap:
    layer: int
    stage: str
    kind: str
    data: np.ndarray  # [N_q, N_k, K] float32

    @property
    def n_heads(self):
        return self.data.shape[2]


def attnmap_bytes(m):
    data = np.asarray(m.data)
    if data.ndim != 3:
        raise ContractError(f"attention map must be [N_q, N_k, K], got {data.shape}")
    nq, nk, k = data.shape
    head = _HEADER.pack(MAGIC, VERSION, STAGES.index(m.stage), KINDS.index(m.kind), m.layer, nq, nk, k)
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def parse_attnmap(buf):
    if len(buf) < _HEADER.size:
        raise CorruptionError("attention map truncated in header")
    magic, version, stage, kind, layer, nq, nk, k = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptionError("not an attention map file (bad magic)")
    if version != VERSION or stage >= len(STAGES) or kind >= len(KINDS):
        raise CorruptionError(f"unsupported attention map header (version {version}, stage {stage})")
    payload = buf[_HEADER.size :]
    if len(payload) != 4 * nq * nk * k:
        raise CorruptionError(f"attention map payload is {len(payload)} bytes, expected {4 * nq * nk * k}")
    data = np.frombuffer(payload, dtype="<f4").reshape(nq, nk, k).astype(np.float32)
    return AttnMap(layer, STAGES[stage], KINDS[kind], data)


def read_attnmap(path):
    with open(path, "rb") as f:
        return parse_attnmap(f.read())


def attnmap_filename(layer, stage):
    return f"layer{layer}_{stage}.atnm"


def export_attention(trace, out_dir, layers=None, stages=None, sample=0):
    """Write one ``.atnm`` per (layer, stage) of ``trace`` and return the paths.

    ``trace`` is the list of :class:`~eatn.model.AttnTrace` collected during a
    forward pass; for batched passes only example ``sample`` is exported.
    """
    if not trace:
        raise ContractError("attention trace is empty; run a forward pass with tracing enabled")
    stages = list(STAGES) if stages is None else list(stages)
    for s in stages:
        if s not in STAGES:
            raise InputError(f"unknown stage {s!r}; choose from {STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for entry in trace:
        if layers is not None and entry.layer not in layers:
            continue
        for stage in stages:
            arr = getattr(entry, stage)
            if arr.ndim == 4:
                arr = arr[sample]
            path = os.path.join(out_dir, attnmap_filename(entry.layer, stage))
            with open(path, "wb") as f:
                f.write(attnmap_bytes(AttnMap(entry.layer, stage, entry.kind, arr)))
            paths.append(path)
    return paths


def heatmap_pixels(m, head):
    """8-bit grayscale image of one head, min-max scaled; constant maps are mid-gray."""
    if not 0 <= head < m.n_heads:
        raise InputError(f"head {head} out of range for {m.n_heads} heads")
    x = np.asarray(m.data[:, :, head], dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (x - lo) / (hi - lo)).astype(np.uint8)


def render_heatmap(m, head, path):
    """Write a binary PGM (P5); rows are queries, columns keys."""
    pix = heatmap_pixels(m, head)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())
    return path


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise CorruptionError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
