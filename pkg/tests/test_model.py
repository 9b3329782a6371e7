import math

import numpy as np
import pytest

from eatn import tensor as T
from eatn.errors import ContractError, DimensionError, InputError
from eatn.evolving import conv_param_count
from eatn.attention import project_qk, scaled_dot_product_logits
from eatn.model import (EATransformer, ModelSpec, ea_block_forward, ffn, init_params, param_shapes,
                        value_project)
from eatn.tensor import Tensor

from builders import build, encoder_spec, ea_all, image_spec, sample_inputs, seq2seq_spec
from oracles import conv_loop, ffn_loop, softmax_row, value_project_loop
from reference_vanilla import VanillaTransformer


def weights(model):
    return {k: v.data for k, v in model.params.items()}


# -- value projection and FFN ------------------------------------------------------

def test_value_project_identity():
    X = np.arange(12, dtype=float).reshape(3, 4)
    A = np.broadcast_to(np.eye(3)[:, :, None], (3, 3, 2)).copy()
    out = value_project(Tensor(A), Tensor(X), Tensor(np.eye(4)), Tensor(np.eye(4))).data
    assert np.array_equal(out, X)


def test_value_project_uniform_rows_average(rng):
    X, WV, WO = rng.standard_normal((4, 6)), rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    A = np.full((3, 4, 3), 0.25)
    out = value_project(Tensor(A), Tensor(X), Tensor(WV), Tensor(WO)).data
    expect = (X @ WV).mean(axis=0) @ WO
    np.testing.assert_allclose(out, np.broadcast_to(expect, (3, 6)), atol=1e-13)


@pytest.mark.parametrize("heads", [1, 2])
def test_value_project_matches_loop(heads):
    rng = np.random.default_rng(31 + heads)
    X, WV, WO = rng.standard_normal((5, 4)), rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    A = rng.random((3, 5, heads))
    out = value_project(Tensor(A), Tensor(X), Tensor(WV), Tensor(WO)).data
    np.testing.assert_allclose(out, value_project_loop(A, X, WV, WO), atol=1e-13)


def test_value_project_mismatch():
    with pytest.raises(DimensionError):
        value_project(Tensor(np.ones((3, 4, 2))), Tensor(np.ones((5, 4))), Tensor(np.eye(4)), Tensor(np.eye(4)))


def test_ffn_cases(rng):
    H = rng.standard_normal((3, 4))
    z = Tensor(np.zeros((4, 4)))
    zb = Tensor(np.zeros(4))
    assert np.array_equal(ffn(Tensor(H), z, zb, z, zb).data, np.zeros((3, 4)))
    I = Tensor(np.eye(4))
    assert np.array_equal(ffn(Tensor(H), I, zb, I, zb).data, np.maximum(H, 0))
    W1, b1, W2, b2 = (rng.standard_normal(s) for s in [(4, 6), (6,), (6, 4), (4,)])
    out = ffn(Tensor(H), Tensor(W1), Tensor(b1), Tensor(W2), Tensor(b2)).data
    np.testing.assert_allclose(out, ffn_loop(H, W1, b1, W2, b2), atol=1e-13)


# -- straight-line oracle for a tiny EA encoder -------------------------------------

def ea_encoder_loop(model, tokens, alpha, beta):
    """N tokens, positional none, encoder EA blocks written as explicit loops."""
    s, w = model.spec, weights(model)
    C, K, d = s.d_model, s.n_heads, s.head_dim
    n = len(tokens)
    X = np.array([w["src_embed"][t] * math.sqrt(C) for t in tokens])
    prev = None
    for layer in range(s.n_enc_layers):
        p = f"enc.{layer}.attn"
        Q, Km, V = X @ w[f"{p}.W_Q"], X @ w[f"{p}.W_K"], X @ w[f"{p}.W_V"]
        cur = np.zeros((n, n, K))
        for i in range(n):
            for j in range(n):
                for k in range(K):
                    cur[i, j, k] = sum(Q[i, k * d + t] * Km[j, k * d + t] for t in range(d)) / math.sqrt(d)
        a_in = cur if prev is None else alpha * prev + (1 - alpha) * cur
        conv = np.maximum(conv_loop(a_in, w[f"{p}.conv.kernel"], w[f"{p}.conv.bias"]), 0.0)
        a_logit = beta * conv + (1 - beta) * a_in
        prev = a_logit
        A = np.zeros_like(a_logit)
        for i in range(n):
            for k in range(K):
                A[i, :, k] = softmax_row(list(a_logit[i, :, k]))
        H = value_project_loop(A, X, w[f"{p}.W_V"], w[f"{p}.W_O"])
        X1 = X + H
        X1 = (X1 - X1.mean(1, keepdims=True)) / np.sqrt(X1.var(1, keepdims=True) + s.ln_eps)
        X1 = X1 * w[f"enc.{layer}.norm1.gain"] + w[f"enc.{layer}.norm1.offset"]
        f = f"enc.{layer}.ffn"
        X2 = X1 + ffn_loop(X1, w[f"{f}.W_1"], w[f"{f}.b_1"], w[f"{f}.W_2"], w[f"{f}.b_2"])
        X2 = (X2 - X2.mean(1, keepdims=True)) / np.sqrt(X2.var(1, keepdims=True) + s.ln_eps)
        X = X2 * w[f"enc.{layer}.norm2.gain"] + w[f"enc.{layer}.norm2.offset"]
    return X


def test_tiny_ea_encoder_matches_loop_oracle():
    spec = encoder_spec(alpha=0.4, beta=0.6, positional="none", max_len=5)
    assert (spec.d_model, spec.n_heads, spec.n_enc_layers) == (8, 2, 2)
    model = build(spec, seed=3, jitter_scale=0.5)
    tokens = np.array([1, 4, 0, 6, 2])
    feats, _ = model.encode(tokens)
    np.testing.assert_allclose(feats.data, ea_encoder_loop(model, tokens, 0.4, 0.6), atol=1e-12)


# -- reductions and the residual chain ----------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: encoder_spec(positional="relative_1d"), lambda: encoder_spec(positional="absolute_sinusoidal"),
    lambda: seq2seq_spec(), lambda: seq2seq_spec(positional="relative_1d"), lambda: image_spec()])
def test_vanilla_reduction_against_reference(make):
    spec = make()
    model = build(spec, seed=1)
    ref = VanillaTransformer(spec, weights(model))
    rng = np.random.default_rng(2)
    for _ in range(3):
        x, y = sample_inputs(spec, rng)
        np.testing.assert_allclose(model.forward(x, y).data, ref.forward(x, y), rtol=0, atol=1e-12)


def test_ea_differs_from_reference_when_enabled():
    spec = encoder_spec(alpha=0.5, beta=0.5)
    model = build(spec, seed=1)
    x, _ = sample_inputs(spec, np.random.default_rng(0))
    assert np.abs(model.forward(x).data - VanillaTransformer(spec, weights(model)).forward(x)).max() > 1e-6


def test_alpha_one_blocks_share_logits(rng):
    spec = encoder_spec(alpha=1.0, beta=0.0, layers=3)
    model = build(spec, seed=4)
    trace = []
    model.forward(rng.integers(0, 7, size=5), trace=trace)
    assert np.array_equal(trace[1].post_conv, trace[0].post_conv)
    assert np.array_equal(trace[2].post_conv, trace[0].post_conv)
    assert np.array_equal(trace[1].pre_conv, trace[0].post_conv)


def test_residual_chain_carries_post_conv_logits(rng):
    spec = encoder_spec(alpha=0.3, beta=0.7, positional="none")
    model = build(spec, seed=4)
    x = rng.integers(0, 7, size=5)
    trace = []
    model.forward(x, trace=trace)
    Y0, state0, _ = ea_block_forward(model.embed_source(x), None, model.block_params(0), spec.ea["encoder"])
    proj = model.block_params(1).attn.proj
    cur1 = scaled_dot_product_logits(*project_qk(Y0, proj), proj.head_dim).data
    np.testing.assert_allclose(trace[0].post_conv, state0.logits.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(trace[1].pre_conv, 0.3 * trace[0].post_conv + 0.7 * cur1, rtol=0, atol=1e-13)
    assert not np.allclose(trace[0].post_conv, trace[0].pre_conv)


def test_batched_forward_equals_per_example(rng):
    for spec in (seq2seq_spec(alpha=0.2, beta=0.5), image_spec(alpha=0.5, beta=1.0)):
        model = build(spec, seed=5)
        x, y = sample_inputs(spec, rng, batch=3)
        full = model.forward(x, y).data
        for b in range(3):
            one = model.forward(x[b], None if y is None else y[b]).data
            np.testing.assert_allclose(full[b], one, rtol=0, atol=1e-12)


# -- encoder ---------------------------------------------------------------------------

def test_single_token_maps_are_one(rng):
    model = build(encoder_spec(alpha=0.5, beta=0.5), seed=1)
    trace = []
    model.forward(np.array([3]), trace=trace)
    for t in trace:
        assert t.post_softmax.shape == (1, 1, 2)
        assert np.all(t.post_softmax == 1.0)


def test_permutation_equivariance_without_positions(rng):
    model = build(encoder_spec(alpha=0.5, beta=0.0, positional="none"), seed=2)
    x = np.array([1, 5, 2, 6, 0])
    perm = np.array([3, 0, 4, 1, 2])
    a = model.encode(x)[0].data
    b = model.encode(x[perm])[0].data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_encoder_input_errors():
    model = build(encoder_spec(), seed=0)
    with pytest.raises(InputError):
        model.encode(np.array([1, 7]))
    with pytest.raises(InputError):
        model.encode(np.array([-1, 2]))
    with pytest.raises(InputError):
        model.encode(np.zeros(7, int))
    with pytest.raises(InputError):
        model.encode(np.array([0.5, 1.0]))
    with pytest.raises(ContractError):
        model.encode(np.zeros(0, int))


# -- decoder -----------------------------------------------------------------------------

DEC_VARIANTS = [dict(), dict(positional="relative_1d"), dict(alpha=0.4, beta=0.6),
                dict(alpha=0.4, beta=0.6, positional="relative_1d")]


@pytest.mark.parametrize("kw", DEC_VARIANTS)
def test_decode_step_equals_teacher_forcing(kw):
    spec = seq2seq_spec(**kw)
    model = build(spec, seed=6)
    rng = np.random.default_rng(0)
    src, tgt = rng.integers(0, 7, 5), rng.integers(0, 7, 6)
    enc, _ = model.encode(src)
    tgt_in = model.shift_right(tgt)
    full = model.decode_teacher_forced(tgt_in, enc).data
    for t in range(1, len(tgt_in) + 1):
        step = model.decode_step(tgt_in[:t], enc).data
        np.testing.assert_allclose(step, full[t - 1], rtol=0, atol=1e-9)


@pytest.mark.parametrize("kw", DEC_VARIANTS)
def test_future_target_does_not_change_past_logits(kw):
    spec = seq2seq_spec(**kw)
    model = build(spec, seed=7)
    rng = np.random.default_rng(1)
    src, tgt_in = rng.integers(0, 7, 5), rng.integers(0, 8, 6)
    enc, _ = model.encode(src)
    base = model.decode_teacher_forced(tgt_in, enc).data
    for t in range(5):
        changed = tgt_in.copy()
        changed[t + 1] = (changed[t + 1] + 3) % 8
        out = model.decode_teacher_forced(changed, enc).data
        assert np.abs(out[: t + 1] - base[: t + 1]).max() <= 1e-12


def test_length_one_decode(rng):
    model = build(seq2seq_spec(alpha=0.2, beta=0.5), seed=8)
    enc, _ = model.encode(rng.integers(0, 7, 4))
    prefix = np.array([model.spec.bos_id])
    assert np.array_equal(model.decode_step(prefix, enc).data, model.decode_teacher_forced(prefix, enc).data[0])


def test_empty_target_raises(rng):
    model = build(seq2seq_spec(), seed=0)
    enc, _ = model.encode(rng.integers(0, 7, 4))
    with pytest.raises(ContractError):
        model.decode_teacher_forced(np.zeros(0, int), enc)


@pytest.mark.parametrize("positional", ["absolute_sinusoidal", "relative_1d"])
def test_end_to_end_decoder_causality_by_autodiff(positional):
    spec = seq2seq_spec(alpha=0.0, beta=0.8, positional=positional)
    model = build(spec, seed=9)
    for p in model.params.values():
        if p.name.endswith("conv.bias"):
            p.data[:] = 2.0  # keep the conv ReLUs open so gradients actually flow
    src = np.array([0, 3, 5, 1, 2])
    tgt_in = np.array([7, 1, 4, 0, 6, 2])  # distinct ids, so embedding rows map to positions
    enc, _ = model.encode(src)
    table = model.params["tgt_embed"]
    for t in range(6):
        table.zero_grad()
        out = model.decode_teacher_forced(tgt_in, enc)
        T.backward(T.sum_(T.getitem(out, (t,))))
        for u in range(6):
            row = table.grad[tgt_in[u]]
            if u > t:
                assert np.all(row == 0.0), (t, u)
            else:
                assert np.any(row != 0.0), (t, u)


def test_greedy_decode_shape(rng):
    model = build(seq2seq_spec(), seed=0)
    out = model.greedy_decode(rng.integers(0, 7, size=(2, 5)))
    assert out.shape == (2, 5) and out.max() < 7


# -- images --------------------------------------------------------------------------------

def test_constant_image_tokens_identical_after_block_one():
    spec = image_spec(alpha=0.5, beta=1.0)
    model = build(spec, seed=10)
    for name in ("enc.0.attn.rel_h", "enc.0.attn.rel_w"):
        model.params[name].data[:] = 0.0
    img = np.full(spec.image_shape, 0.7)
    feats, _ = model.encode(img)
    np.testing.assert_allclose(feats.data, np.broadcast_to(feats.data[0], feats.shape), rtol=0, atol=1e-12)


def test_single_row_image_equals_sequence_classifier():
    n, V = 5, 6
    common = dict(d_model=8, n_heads=2, d_ff=16, n_enc_layers=2, n_classes=3, ea=ea_all(0.3, 0.5))
    seq = EATransformer.init(ModelSpec(kind="encoder_classifier", src_vocab=V, max_len=n,
                                       positional="relative_1d", **common), 0)
    img_spec = ModelSpec(kind="image_classifier", image_shape=(1, n, V), max_len=n,
                         positional="relative_2d", **common)
    w = {}
    for name, (shape, _) in param_shapes(img_spec).items():
        if name == "pixel_proj.W":
            w[name] = Tensor(seq.params["src_embed"].data * math.sqrt(8))
        elif name == "pixel_proj.b":
            w[name] = Tensor(np.zeros(8))
        elif name.endswith(".rel_h"):
            w[name] = Tensor(np.zeros(shape))
        elif name.endswith(".rel_w"):
            # width offsets run j - i while sequence offsets run i - j
            w[name] = Tensor(seq.params[name[:-2]].data[::-1].copy())
        else:
            w[name] = seq.params[name]
    img = EATransformer(img_spec, w)
    tokens = np.array([2, 0, 5, 5, 1])
    pixels = np.eye(V)[tokens].reshape(1, n, V)
    np.testing.assert_allclose(img.classify_image(pixels).data, seq.classify(tokens).data, rtol=0, atol=1e-12)


def test_image_shape_mismatch():
    model = build(image_spec(), seed=0)
    with pytest.raises(InputError):
        model.classify_image(np.zeros((4, 3, 2)))


# -- parameters ---------------------------------------------------------------------------

@pytest.mark.parametrize("make", [encoder_spec, seq2seq_spec, image_spec])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_param_count_is_vanilla_plus_conv(make, k):
    ea = make(beta=0.5, ea=ea_all(0.0, 0.5, kernel_size=k))
    vanilla = make(ea=ea_all(0.0, 0.0, conv_enabled=False))
    n_attn = len(ea.attention_instances())
    assert EATransformer.init(ea).n_params() == EATransformer.init(vanilla).n_params() + n_attn * conv_param_count(2, k)


def test_conv_params_do_not_shift_other_weights():
    a = init_params(seq2seq_spec(), 5)
    b = init_params(seq2seq_spec(ea=ea_all(conv_enabled=False)), 5)
    assert set(b) < set(a)
    for name in b:
        assert np.array_equal(a[name].data, b[name].data)


def test_param_name_mismatch():
    spec = encoder_spec()
    p = init_params(spec, 0)
    p["stray"] = Tensor(np.zeros(1))
    with pytest.raises(ContractError, match="stray"):
        EATransformer(spec, p)


def test_spec_round_trip_dict():
    spec = seq2seq_spec(alpha=0.1, beta=0.2, positional="relative_1d")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
