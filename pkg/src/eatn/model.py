"""EA-Transformer blocks and the three model kinds built from them.

Blocks are post-norm: ``LN(x + sublayer(x))``.  Each attention instance
(encoder self, decoder self, encoder-decoder) threads its own chain of
post-convolution logits from block to block.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    PositionalEncoding,
    ProjectionSet,
    attention_logits,
    build_causal_mask,
    masked_row_softmax,
    no_mask,
    project_qk,
    sinusoidal_encoding,
)
from .errors import ConfigError, ContractError, DimensionError, InputError
from .evolving import AttentionConvParams, EvolvingAttentionConfig, evolve_logits
from .tensor import Tensor

KINDS = ("encoder_classifier", "seq2seq", "image_classifier")
ATTENTION_TYPES = ("encoder", "decoder_self", "encoder_decoder")


def _default_ea():
    return {t: EvolvingAttentionConfig(mode=t) for t in ATTENTION_TYPES}


@dataclass
class ModelSpec:
    kind: str
    d_model: int
    n_heads: int
    d_ff: int
    n_enc_layers: int
    n_dec_layers: int = 0
    src_vocab: int = 0
    tgt_vocab: int = 0
    n_classes: int = 0
    image_shape: tuple | None = None
    max_len: int = 16
    positional: str = "absolute_sinusoidal"
    r_max: int | None = None
    ea: dict = field(default_factory=_default_ea)
    preset: str | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.image_shape, list):
            self.image_shape = tuple(self.image_shape)
        ea = _default_ea()
        for key, cfg in (self.ea or {}).items():
            if key not in ATTENTION_TYPES:
                raise ConfigError(f"unknown attention type {key!r}", "model.ea")
            if isinstance(cfg, dict):
                cfg = EvolvingAttentionConfig(**{**cfg, "mode": key})
            elif cfg.mode != key:
                raise ConfigError(f"config mode {cfg.mode!r} under key {key!r}", f"model.ea.{key}")
            ea[key] = cfg
        self.ea = ea
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(msg, f"model.{name}")

        if self.kind not in KINDS:
            bad("kind", f"must be one of {KINDS}, got {self.kind!r}")
        for name in ("d_model", "n_heads", "d_ff", "n_enc_layers", "max_len"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, f"must be a positive integer, got {getattr(self, name)!r}")
        if self.d_model % self.n_heads:
            bad("n_heads", f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.kind == "seq2seq":
            if self.n_dec_layers < 1:
                bad("n_dec_layers", "seq2seq needs at least one decoder layer")
            if self.src_vocab < 1 or self.tgt_vocab < 1:
                bad("src_vocab", "seq2seq needs src_vocab and tgt_vocab")
        elif self.n_classes < 2:
            bad("n_classes", "classifiers need at least two classes")
        if self.kind == "encoder_classifier" and self.src_vocab < 1:
            bad("src_vocab", "encoder_classifier needs src_vocab")
        if self.kind == "image_classifier":
            if self.image_shape is None or len(self.image_shape) != 3:
                bad("image_shape", "image_classifier needs image_shape [H, W, channels]")
            H, W, _ = self.image_shape
            if H * W > self.max_len:
                bad("max_len", f"image has {H * W} pixels but max_len={self.max_len}")
            if self.positional not in ("relative_2d", "none"):
                bad("positional", "image_classifier uses relative_2d or none")
        elif self.positional == "relative_2d":
            bad("positional", "relative_2d is only defined for image_classifier")
        if self.positional not in ("absolute_sinusoidal", "relative_1d", "relative_2d", "none"):
            bad("positional", f"unknown mode {self.positional!r}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def bos_id(self):
        return self.tgt_vocab

    @property
    def radius(self):
        if self.r_max is not None:
            return self.r_max
        if self.kind == "image_classifier":
            return max(self.image_shape[:2])
        return self.max_len

    def attention_instances(self):
        """``(prefix, attention type)`` for every attention sublayer, in forward order."""
        out = [(f"enc.{i}.attn", "encoder") for i in range(self.n_enc_layers)]
        if self.kind == "seq2seq":
            for i in range(self.n_dec_layers):
                out.append((f"dec.{i}.self_attn", "decoder_self"))
                out.append((f"dec.{i}.cross_attn", "encoder_decoder"))
        return out

    def to_dict(self):
        d = asdict(self)
        d["ea"] = {k: v.to_dict() for k, v in self.ea.items()}
        if d["image_shape"] is not None:
            d["image_shape"] = list(d["image_shape"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ea"] = {k: {kk: vv for kk, vv in v.items() if kk != "mode"} for k, v in d.get("ea", {}).items()}
        return cls(**d)


# --------------------------------------------------------------------------
# parameters


def param_shapes(spec):
    """Ordered ``name -> (shape, init)`` for every tensor the model owns."""
    C, K, d, F = spec.d_model, spec.n_heads, spec.head_dim, spec.d_ff
    rows = 2 * spec.radius + 1
    shapes = {}

    def attention(prefix, attn_type, positional):
        for w in ("W_Q", "W_K", "W_V"):
            shapes[f"{prefix}.{w}"] = ((C, C), "uniform")
        shapes[f"{prefix}.W_O"] = ((C, C), "uniform")
        if positional == "relative_1d":
            shapes[f"{prefix}.rel"] = ((rows, d), "table")
        elif positional == "relative_2d":
            shapes[f"{prefix}.rel_h"] = ((rows, d), "table")
            shapes[f"{prefix}.rel_w"] = ((rows, d), "table")
        cfg = spec.ea[attn_type]
        if cfg.conv_enabled:
            k = cfg.kernel_size
            shapes[f"{prefix}.conv.kernel"] = ((k, k, K, K), "conv")
            shapes[f"{prefix}.conv.bias"] = ((K,), "zeros")

    def norm(prefix):
        shapes[f"{prefix}.gain"] = ((C,), "ones")
        shapes[f"{prefix}.offset"] = ((C,), "zeros")

    def ffn(prefix):
        shapes[f"{prefix}.W_1"] = ((C, F), "uniform")
        shapes[f"{prefix}.b_1"] = ((F,), "zeros")
        shapes[f"{prefix}.W_2"] = ((F, C), "uniform")
        shapes[f"{prefix}.b_2"] = ((C,), "zeros")

    if spec.kind == "image_classifier":
        shapes["pixel_proj.W"] = ((spec.image_shape[2], C), "uniform")
        shapes["pixel_proj.b"] = ((C,), "zeros")
    else:
        shapes["src_embed"] = ((spec.src_vocab, C), "embed")
    enc_pos = spec.positional
    for i in range(spec.n_enc_layers):
        attention(f"enc.{i}.attn", "encoder", enc_pos)
        norm(f"enc.{i}.norm1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.norm2")
    if spec.kind == "seq2seq":
        shapes["tgt_embed"] = ((spec.tgt_vocab + 1, C), "embed")
        for i in range(spec.n_dec_layers):
            attention(f"dec.{i}.self_attn", "decoder_self", enc_pos)
            norm(f"dec.{i}.norm1")
            attention(f"dec.{i}.cross_attn", "encoder_decoder", "none")
            norm(f"dec.{i}.norm2")
            ffn(f"dec.{i}.ffn")
            norm(f"dec.{i}.norm3")
        shapes["head.W"] = ((C, spec.tgt_vocab), "uniform")
        shapes["head.b"] = ((spec.tgt_vocab,), "zeros")
    else:
        shapes["head.W"] = ((C, spec.n_classes), "uniform")
        shapes["head.b"] = ((spec.n_classes,), "zeros")
    return shapes


def param_rng(seed, name):
    # one stream per tensor name, so adding or dropping a tensor leaves the rest unchanged
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def init_params(spec, seed):
    params = {}
    for name, (shape, how) in param_shapes(spec).items():
        rng = param_rng(seed, name)
        if how == "uniform":
            lim = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-lim, lim, size=shape)
        elif how == "embed":
            data = rng.normal(0.0, 1.0 / math.sqrt(spec.d_model), size=shape)
        elif how == "table":
            lim = 1.0 / math.sqrt(shape[1])
            data = rng.uniform(-lim, lim, size=shape)
        elif how == "conv":
            k, _, ci, _ = shape
            lim = 0.1 / math.sqrt(k * k * ci)
            data = rng.uniform(-lim, lim, size=shape)
        elif how == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# --------------------------------------------------------------------------
# block pieces


@dataclass
class AttentionParams:
    proj: ProjectionSet
    W_V: Tensor
    W_O: Tensor
    conv: AttentionConvParams | None
    tables: tuple = ()


@dataclass
class BlockParams:
    attn: AttentionParams
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    norm1: tuple
    norm2: tuple
    cross: AttentionParams | None = None
    norm3: tuple | None = None


@dataclass
class AttnTrace:
    """Everything exported for one attention instance of one forward pass."""

    layer: int
    kind: str
    pre_conv: np.ndarray
    post_conv: np.ndarray
    post_softmax: np.ndarray
    mask: np.ndarray


def value_project(A, X, W_V, W_O):
    """Per-head ``A_k (X W_V[k])``, heads concatenated, then ``@ W_O``.

    ``A`` is ``[..., N_q, N_k, K]`` and ``X`` is ``[..., N_k, C]``.
    """
    K = A.shape[-1]
    if A.shape[-2] != X.shape[-2]:
        raise DimensionError(f"attention keys {A.shape} vs values {X.shape}")
    if W_V.shape[1] % K:
        raise DimensionError(f"value width {W_V.shape[1]} not divisible by {K} heads")
    d = W_V.shape[1] // K
    V = (X @ W_V).reshape(X.shape[:-1] + (K, d))
    nd = V.ndim
    Vh = T.transpose(V, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # [..., K, Nk, d]
    nd = A.ndim
    Ah = T.transpose(A, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))  # [..., K, Nq, Nk]
    H = Ah @ Vh  # [..., K, Nq, d]
    nd = H.ndim
    H = T.transpose(H, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # [..., Nq, K, d]
    return H.reshape(H.shape[:-2] + (K * d,)) @ W_O


def ffn(H, W_1, b_1, W_2, b_2):
    return T.add(T.relu(T.add(H @ W_1, b_1)) @ W_2, b_2)


def attention_sublayer(Xq, Xkv, p, cfg, prev, mask, pos, n_heads):
    """Returns ``(H, post-conv state, post-softmax map)``."""
    proj = p.proj
    if Xq is Xkv:
        Q, Kmat = project_qk(Xq, proj)
    else:
        Q = (Xq @ proj.W_Q).reshape(Xq.shape[:-1] + (n_heads, proj.head_dim))
        Kmat = (Xkv @ proj.W_K).reshape(Xkv.shape[:-1] + (n_heads, proj.head_dim))
    logits = attention_logits(Q, Kmat, proj.head_dim, pos)
    state = evolve_logits(prev, logits, p.conv, cfg, mask)
    A = masked_row_softmax(state)
    return value_project(A, Xkv, p.W_V, p.W_O), state, A


def ea_block_forward(X, prev_attn, params, cfg, mask=None, pos=None, n_heads=None, eps=1e-5):
    """One encoder EA block: attention (with evolution) and FFN, each post-normed.

    Returns ``(Y, post-conv AttentionState, post-softmax map)``.
    """
    n_heads = n_heads or params.attn.proj.n_heads
    n = X.shape[-2]
    if mask is None:
        mask = no_mask(n, n)
    H, state, A = attention_sublayer(X, X, params.attn, cfg, prev_attn, mask, pos, n_heads)
    X1 = T.layer_norm(T.add(X, H), *params.norm1, eps=eps)
    F = ffn(X1, params.W_1, params.b_1, params.W_2, params.b_2)
    return T.layer_norm(T.add(X1, F), *params.norm2, eps=eps), state, A


# --------------------------------------------------------------------------
# the model


class EATransformer:
    """Parameter container plus forward passes for one :class:`ModelSpec`."""

    def __init__(self, spec, params):
        self.spec = spec
        expected = param_shapes(spec)
        missing = sorted(set(expected) - set(params))
        unknown = sorted(set(params) - set(expected))
        if missing or unknown:
            raise ContractError(f"parameter names do not match spec: missing {missing}, unknown {unknown}")
        for name, (shape, _) in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, spec, seed=0):
        return cls(spec, init_params(spec, seed))

    def parameters(self):
        return self.params

    def n_params(self):
        return int(sum(t.data.size for t in self.params.values()))

    # -- assembly helpers ---------------------------------------------------

    def _attn(self, prefix, attn_type):
        p = self.params
        spec = self.spec
        conv = None
        if f"{prefix}.conv.kernel" in p:
            conv = AttentionConvParams(p[f"{prefix}.conv.kernel"], p[f"{prefix}.conv.bias"])
        tables = tuple(p[f"{prefix}.{t}"] for t in ("rel", "rel_h", "rel_w") if f"{prefix}.{t}" in p)
        return AttentionParams(ProjectionSet(p[f"{prefix}.W_Q"], p[f"{prefix}.W_K"], spec.n_heads),
                               p[f"{prefix}.W_V"], p[f"{prefix}.W_O"], conv, tables)

    def _norm(self, prefix):
        return self.params[f"{prefix}.gain"], self.params[f"{prefix}.offset"]

    def _ffn(self, prefix):
        p = self.params
        return p[f"{prefix}.W_1"], p[f"{prefix}.b_1"], p[f"{prefix}.W_2"], p[f"{prefix}.b_2"]

    def block_params(self, layer):
        W_1, b_1, W_2, b_2 = self._ffn(f"enc.{layer}.ffn")
        return BlockParams(self._attn(f"enc.{layer}.attn", "encoder"), W_1, b_1, W_2, b_2,
                           self._norm(f"enc.{layer}.norm1"), self._norm(f"enc.{layer}.norm2"))

    def _pos(self, attn_params, n, grid=None):
        mode = self.spec.positional
        if mode == "relative_1d":
            return PositionalEncoding("relative_1d", self.spec.radius, attn_params.tables)
        if mode == "relative_2d":
            return PositionalEncoding("relative_2d", self.spec.radius, attn_params.tables, grid)
        return None

    # -- embedding ------------------------------------------------------------

    def _check_tokens(self, tokens, vocab, what):
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"{what} must be integer token ids")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
            bad = tokens[(tokens < 0) | (tokens >= vocab)].ravel()[0]
            raise InputError(f"{what} token {int(bad)} is outside vocabulary of size {vocab}")
        if tokens.shape[-1] > self.spec.max_len:
            raise InputError(f"{what} length {tokens.shape[-1]} exceeds max_len {self.spec.max_len}")
        if tokens.shape[-1] < 1:
            raise ContractError(f"{what} is empty")
        return tokens

    def _embed(self, table, tokens):
        C = self.spec.d_model
        X = T.scale(T.getitem(self.params[table], tokens), math.sqrt(C))
        if self.spec.positional == "absolute_sinusoidal":
            X = T.add(X, Tensor(sinusoidal_encoding(tokens.shape[-1], C)))
        return X

    def embed_source(self, tokens):
        tokens = self._check_tokens(tokens, self.spec.src_vocab, "source")
        return self._embed("src_embed", tokens)

    def embed_pixels(self, pixels):
        H, W, ch = self.spec.image_shape
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.shape[-3:] != (H, W, ch):
            raise InputError(f"image shape {pixels.shape[-3:]} does not match spec {(H, W, ch)}")
        flat = Tensor(pixels.reshape(pixels.shape[:-3] + (H * W, ch)))
        return T.add(flat @ self.params["pixel_proj.W"], self.params["pixel_proj.b"])

    # -- stacks ---------------------------------------------------------------

    def encode_embedded(self, X, trace=None, grid=None):
        """Run the encoder stack on already-embedded ``X[..., N, C]``."""
        spec = self.spec
        cfg = spec.ea["encoder"]
        n = X.shape[-2]
        mask = no_mask(n, n)
        prev = None
        states = []
        for i in range(spec.n_enc_layers):
            bp = self.block_params(i)
            X, prev, A = ea_block_forward(X, prev, bp, cfg, mask, self._pos(bp.attn, n, grid),
                                          spec.n_heads, spec.ln_eps)
            states.append(prev)
            if trace is not None:
                trace.append(_trace(len(trace), "encoder", prev, A))
        return X, states

    def encode(self, inputs, trace=None):
        """Embed tokens (or pixels for image models) and run the encoder stack."""
        if self.spec.kind == "image_classifier":
            H, W, _ = self.spec.image_shape
            return self.encode_embedded(self.embed_pixels(inputs), trace, grid=(H, W))
        return self.encode_embedded(self.embed_source(inputs), trace)

    def decode_teacher_forced(self, tgt_in, enc_features, trace=None):
        """Per-position vocabulary logits ``[..., T, V]`` for decoder inputs ``tgt_in``."""
        spec = self.spec
        if spec.kind != "seq2seq":
            raise ContractError("decode is only defined for seq2seq models")
        tgt_in = self._check_tokens(tgt_in, spec.tgt_vocab + 1, "target")
        Y = self._embed("tgt_embed", tgt_in)
        t_len = tgt_in.shape[-1]
        s_len = enc_features.shape[-2]
        self_mask = build_causal_mask(t_len)
        cross_mask = no_mask(t_len, s_len)
        prev_self = prev_cross = None
        base = spec.n_enc_layers
        for i in range(spec.n_dec_layers):
            sa = self._attn(f"dec.{i}.self_attn", "decoder_self")
            H, prev_self, A = attention_sublayer(Y, Y, sa, spec.ea["decoder_self"], prev_self,
                                                 self_mask, self._pos(sa, t_len), spec.n_heads)
            Y = T.layer_norm(T.add(Y, H), *self._norm(f"dec.{i}.norm1"), eps=spec.ln_eps)
            if trace is not None:
                trace.append(_trace(base + 2 * i, "decoder_self", prev_self, A))
            ca = self._attn(f"dec.{i}.cross_attn", "encoder_decoder")
            H, prev_cross, A = attention_sublayer(Y, enc_features, ca, spec.ea["encoder_decoder"],
                                                  prev_cross, cross_mask, None, spec.n_heads)
            Y = T.layer_norm(T.add(Y, H), *self._norm(f"dec.{i}.norm2"), eps=spec.ln_eps)
            if trace is not None:
                trace.append(_trace(base + 2 * i + 1, "encoder_decoder", prev_cross, A))
            F = ffn(Y, *self._ffn(f"dec.{i}.ffn"))
            Y = T.layer_norm(T.add(Y, F), *self._norm(f"dec.{i}.norm3"), eps=spec.ln_eps)
        return T.add(Y @ self.params["head.W"], self.params["head.b"])

    def shift_right(self, tgt):
        tgt = np.asarray(tgt)
        bos = np.full(tgt.shape[:-1] + (1,), self.spec.bos_id, dtype=tgt.dtype)
        return np.concatenate([bos, tgt[..., :-1]], axis=-1)

    def decode_step(self, prefix, enc_features):
        """Logits for the next token after ``prefix`` (which starts with BOS)."""
        logits = self.decode_teacher_forced(prefix, enc_features)
        return T.getitem(logits, (Ellipsis, -1, slice(None)))

    def greedy_decode(self, src, length=None):
        src = np.asarray(src)
        length = src.shape[-1] if length is None else length
        enc, _ = self.encode(src)
        prefix = np.full(src.shape[:-1] + (1,), self.spec.bos_id, dtype=np.int64)
        for _ in range(length):
            nxt = self.decode_step(prefix, enc).data.argmax(axis=-1)
            prefix = np.concatenate([prefix, nxt[..., None]], axis=-1)
        return prefix[..., 1:]

    # -- task heads -------------------------------------------------------------

    def _pool_head(self, features):
        pooled = T.mean(features, axis=-2, keepdims=True)  # [..., 1, C]
        logits = T.add(pooled @ self.params["head.W"], self.params["head.b"])
        return logits.reshape(logits.shape[:-2] + (logits.shape[-1],))

    def classify(self, tokens, trace=None):
        features, _ = self.encode(tokens, trace)
        return self._pool_head(features)

    def classify_image(self, pixels, trace=None):
        if self.spec.kind != "image_classifier":
            raise ContractError("classify_image needs an image_classifier model")
        features, _ = self.encode(pixels, trace)
        return self._pool_head(features)

    def forward(self, inputs, targets=None, trace=None):
        """Task logits: class logits for classifiers, teacher-forced logits for seq2seq."""
        kind = self.spec.kind
        if kind == "seq2seq":
            enc, _ = self.encode(inputs, trace)
            return self.decode_teacher_forced(self.shift_right(targets), enc, trace)
        if kind == "image_classifier":
            return self.classify_image(inputs, trace)
        return self.classify(inputs, trace)


def _trace(layer, kind, state, A):
    return AttnTrace(layer, kind, state.pre_conv.data.copy(), state.logits.data.copy(),
                     A.data.copy(), state.mask.copy())
