"""Attention-map generation: projections, dot-product logits, positional terms, softmax.

Attention images use the layout ``[..., N_q, N_k, K_heads]`` so a layer's heads
stack as channels of one ``N_q x N_k`` image.  Masks are Boolean ``[N_q, N_k]``
arrays with true meaning forbidden; they are never folded into the logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

POSITION_MODES = ("absolute_sinusoidal", "relative_1d", "relative_2d", "none")


@dataclass
class AttentionState:
    """Pre-softmax logits ``[..., N_q, N_k, K]`` plus the shared position mask."""

    logits: Tensor
    mask: np.ndarray
    pre_conv: Tensor | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != tuple(self.logits.shape[-3:-1]):
            raise DimensionError(
                f"mask {self.mask.shape} does not match logits {self.logits.shape}")

    @property
    def n_heads(self):
        return self.logits.shape[-1]


@dataclass
class ProjectionSet:
    W_Q: Tensor
    W_K: Tensor
    n_heads: int

    def __post_init__(self):
        width = self.W_Q.shape[1]
        if self.W_K.shape != self.W_Q.shape:
            raise DimensionError(f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} differ")
        if width % self.n_heads:
            raise ConfigError(f"attention width {width} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self):
        return self.W_Q.shape[1] // self.n_heads


@dataclass
class PositionalEncoding:
    """Positional configuration for one attention instance.

    ``tables`` holds ``E_rel`` for ``relative_1d`` or ``(E_H, E_W)`` for
    ``relative_2d``; each table has ``2 * r_max + 1`` rows indexed by offset + r_max.
    """

    mode: str
    r_max: int = 0
    tables: tuple = field(default_factory=tuple)
    grid: tuple | None = None

    def __post_init__(self):
        if self.mode not in POSITION_MODES:
            raise ConfigError(f"unknown positional mode {self.mode!r}")
        rows = 2 * self.r_max + 1
        need = {"relative_1d": 1, "relative_2d": 2}.get(self.mode, 0)
        if len(self.tables) != need:
            raise ConfigError(f"mode {self.mode} needs {need} embedding tables, got {len(self.tables)}")
        for t in self.tables:
            if t.shape[0] != rows:
                raise DimensionError(f"relative table has {t.shape[0]} rows, expected {rows}")
        if self.mode == "relative_2d" and self.grid is None:
            raise ConfigError("relative_2d needs a declared (H, W) grid")


def project_qk(X, proj):
    """Return per-head queries and keys, both ``[..., N, K, d]``."""
    if X.shape[-1] != proj.W_Q.shape[0]:
        raise DimensionError(f"input width {X.shape[-1]} vs projection {proj.W_Q.shape}")
    lead = X.shape[:-1]
    per_head = lead + (proj.n_heads, proj.head_dim)
    return (X @ proj.W_Q).reshape(per_head), (X @ proj.W_K).reshape(per_head)


def _heads_first(t):
    # [..., N, K, d] -> [..., K, N, d]
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(t, axes)


def _heads_last(t):
    # [..., K, Nq, Nk] -> [..., Nq, Nk, K]
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    return T.transpose(t, axes)


def scaled_dot_product_logits(Q, K_mat, d):
    if d <= 0:
        raise ConfigError(f"head dimension must be positive, got {d}")
    if Q.shape[-2:] != K_mat.shape[-2:]:
        raise DimensionError(f"query heads {Q.shape} vs key heads {K_mat.shape}")
    qh = _heads_first(Q)
    kh = _heads_first(K_mat)
    nd = kh.ndim
    kt = T.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return _heads_last(T.scale(qh @ kt, 1.0 / math.sqrt(d)))


def relative_index_1d(n_q, n_k, r_max):
    """Table row for each (i, j): ``clip(i - j, -r_max, r_max) + r_max``."""
    i = np.arange(n_q)[:, None]
    j = np.arange(n_k)[None, :]
    return np.clip(i - j, -r_max, r_max) + r_max


def relative_index_2d(grid, r_max):
    """Height and width table rows for pixel pairs in row-major order.

    Offsets are ``h(j) - h(i)`` and ``w(j) - w(i)``, clipped to ``[-r_max, r_max]``.
    """
    H, W = grid
    p = np.arange(H * W)
    h, w = p // W, p % W
    dh = np.clip(h[None, :] - h[:, None], -r_max, r_max) + r_max
    dw = np.clip(w[None, :] - w[:, None], -r_max, r_max) + r_max
    return dh, dw


def _gather_bias(Q, table, index):
    # (q_i . e_{index[i, j]}) for every head: Q [..., N, K, d], table [R, d]
    qe = Q @ T.transpose(table, (1, 0))  # [..., N, K, R]
    nd = qe.ndim
    qe = T.transpose(qe, tuple(range(nd - 2)) + (nd - 1, nd - 2))  # [..., N, R, K]
    rows = np.broadcast_to(np.arange(index.shape[0])[:, None], index.shape)
    return T.getitem(qe, (Ellipsis, rows, index, slice(None)))


def relative_bias_1d(Q, enc):
    if enc.mode != "relative_1d":
        raise ConfigError(f"relative_bias_1d needs mode relative_1d, got {enc.mode}")
    n = Q.shape[-3]
    return _gather_bias(Q, enc.tables[0], relative_index_1d(n, n, enc.r_max))


def relative_bias_2d(Q, enc, H, W):
    if enc.mode != "relative_2d":
        raise ConfigError(f"relative_bias_2d needs mode relative_2d, got {enc.mode}")
    n = Q.shape[-3]
    if H * W != n:
        raise DimensionError(f"grid {H}x{W} does not cover {n} tokens")
    dh, dw = relative_index_2d((H, W), enc.r_max)
    return T.add(_gather_bias(Q, enc.tables[0], dh), _gather_bias(Q, enc.tables[1], dw))


def sinusoidal_encoding(n, width):
    """``[n, width]`` sin/cos table of the original Transformer."""
    pos = np.arange(n)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def masked_row_softmax(state):
    """Normalize each query row over allowed keys; forbidden entries become exactly 0."""
    mask = state.mask
    if mask.any():
        full = mask.all(axis=1)
        if full.any():
            raise ContractError(f"attention row {int(np.argmax(full))} is fully masked")
        return T.masked_softmax(state.logits, mask[:, :, None], axis=-2)
    return T.masked_softmax(state.logits, None, axis=-2)


def build_causal_mask(n):
    """``mask[i, j] = j > i``."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def no_mask(n_q, n_k):
    return np.zeros((n_q, n_k), dtype=bool)


def attention_logits(Q, K_mat, d, enc=None):
    """Dot-product logits plus whichever relative term ``enc`` calls for."""
    logits = scaled_dot_product_logits(Q, K_mat, d)
    if enc is None or enc.mode in ("none", "absolute_sinusoidal"):
        return logits
    if enc.mode == "relative_1d":
        return T.add(logits, relative_bias_1d(Q, enc))
    return T.add(logits, relative_bias_2d(Q, enc, *enc.grid))
