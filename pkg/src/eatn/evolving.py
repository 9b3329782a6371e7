"""Residual-convolution evolution of attention logits across blocks.

For block ``i``::

    A_input = alpha * A_logit[i-1] + (1 - alpha) * logits[i]
    A_logit = beta * ReLU(conv(A_input)) + (1 - beta) * A_input

The convolution runs over the ``N_q x N_k`` attention image with one channel
per head.  Decoder attention uses masked taps plus a shift so that no output
pixel reads a later target position.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionState
from .errors import ConfigError, ContractError
from .tensor import Tensor

MODES = ("encoder", "decoder_self", "encoder_decoder")
KERNEL_SIZES = (1, 3, 5)


@dataclass
class EvolvingAttentionConfig:
    alpha: float = 0.0
    beta: float = 0.0
    kernel_size: int = 3
    mode: str = "encoder"
    conv_enabled: bool = True
    skip_enabled: bool = True
    # Let the encoder-decoder kernel read the next target row as well.  This is
    # the plain all-taps variant; it breaks target-side causality.
    cross_future_rows: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self, path="ea"):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"must be a number in [0, 1], got {v!r}", f"{path}.{name}")
        if self.kernel_size not in KERNEL_SIZES:
            raise ConfigError(f"must be one of {KERNEL_SIZES}, got {self.kernel_size!r}",
                              f"{path}.kernel_size")
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}, got {self.mode!r}", f"{path}.mode")

    @property
    def effective_alpha(self):
        return float(self.alpha) if self.skip_enabled else 0.0

    @property
    def effective_beta(self):
        return float(self.beta) if self.conv_enabled else 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionConvParams:
    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        kh, kw, ci, co = self.kernel.shape
        if ci != co or self.bias.shape != (co,):
            raise ConfigError(f"attention conv must map K->K channels, got kernel "
                              f"{self.kernel.shape} bias {self.bias.shape}")


def conv_param_count(n_heads, kernel_size):
    return kernel_size * kernel_size * n_heads * n_heads + n_heads


def tap_mask(mode, kernel_size, cross_future_rows=False):
    """Boolean ``[k, k]`` pattern of the kernel taps each mode may use.

    Tap ``(a, c)`` reads input offset ``(a - r, c - r)``.  Decoder self-attention
    drops taps whose column offset exceeds the row offset (the upper-right
    corner); for a 3x3 kernel six taps remain.
    """
    r = kernel_size // 2
    di = np.arange(kernel_size)[:, None] - r
    dj = np.arange(kernel_size)[None, :] - r
    if mode == "encoder":
        return np.ones((kernel_size, kernel_size), dtype=bool)
    if mode == "decoder_self":
        return np.broadcast_to(di >= dj, (kernel_size, kernel_size)).copy()
    if mode == "encoder_decoder":
        if cross_future_rows:
            return np.ones((kernel_size, kernel_size), dtype=bool)
        return np.broadcast_to(di <= 0, (kernel_size, kernel_size)).copy()
    raise ConfigError(f"unknown attention mode {mode!r}")


def conv_encoder(A, params):
    k = params.kernel.shape[0]
    return T.relu(T.conv2d(A, params.kernel, params.bias, tap_mask("encoder", k)))


def conv_decoder_self(A, params):
    if A.shape[-3] != A.shape[-2]:
        raise ContractError(f"decoder self-attention image must be square, got {A.shape}")
    k = params.kernel.shape[0]
    r = k // 2
    out = T.relu(T.conv2d(A, params.kernel, params.bias, tap_mask("decoder_self", k)))
    return T.shift2d(out, r, r) if r else out


def conv_encoder_decoder(A, params, cross_future_rows=False):
    k = params.kernel.shape[0]
    r = k // 2
    mask = tap_mask("encoder_decoder", k, cross_future_rows)
    out = T.relu(T.conv2d(A, params.kernel, params.bias, mask))
    return T.shift2d(out, 0, r) if r else out


def attention_cnn(A, params, cfg):
    if cfg.mode == "encoder":
        return conv_encoder(A, params)
    if cfg.mode == "decoder_self":
        return conv_decoder_self(A, params)
    return conv_encoder_decoder(A, params, cfg.cross_future_rows)


def evolve_logits(prev, current_logits, params, cfg, mask=None):
    """Blend with the previous block's logits, convolve, and blend again.

    Returns the new :class:`AttentionState`; its ``pre_conv`` attribute holds
    the convolution input for export.  Masked positions are zero in both.
    """
    if mask is None:
        mask = prev.mask if prev is not None else np.zeros(current_logits.shape[-3:-1], bool)
    mask = np.asarray(mask, dtype=bool)
    alpha = cfg.effective_alpha if prev is not None else 0.0
    beta = cfg.effective_beta
    if prev is not None:
        if prev.logits.shape != current_logits.shape:
            raise ContractError(f"previous logits {prev.logits.shape} vs current {current_logits.shape}")
        if not np.array_equal(prev.mask, mask):
            raise ContractError("previous attention mask differs from the current one")
    if alpha > 0.0:
        a_input = T.add(T.scale(prev.logits, alpha), T.scale(current_logits, 1.0 - alpha))
    else:
        a_input = current_logits
    has_mask = bool(mask.any())
    m3 = mask[:, :, None]
    if has_mask:
        a_input = T.mask_zero(a_input, m3)
    if beta > 0.0:
        if params is None:
            raise ContractError("convolution is enabled but no attention conv parameters were given")
        a_logit = T.add(T.scale(attention_cnn(a_input, params, cfg), beta),
                        T.scale(a_input, 1.0 - beta))
        if has_mask:
            a_logit = T.mask_zero(a_logit, m3)
    else:
        a_logit = a_input
    return AttentionState(a_logit, mask, pre_conv=a_input)
