"""Closed-form parameter and FLOP accounting.

FLOPs count matrix products and convolutions only, with one multiply-add
contributing 2; the convolution bias contributes one add per output pixel and
channel.  Softmax, normalization, the alpha/beta blends and elementwise
activations are not counted.  Convolution cost assumes every kernel tap, also
for the masked decoder kernels.
"""
from dataclasses import dataclass, field

from .evolving import conv_param_count


@dataclass
class CostReport:
    seq_len: int
    params: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)
    # embeddings and output head
    other_flops: int = 0

    @property
    def conv_params(self):
        return sum(b["conv_params"] for b in self.blocks)

    @property
    def vanilla_params(self):
        return sum(self.params.values()) - self.conv_params

    @property
    def ea_params(self):
        return sum(self.params.values())

    @property
    def conv_flops(self):
        return sum(b["conv_flops"] for b in self.blocks)

    @property
    def vanilla_flops(self):
        return sum(b["vanilla_flops"] for b in self.blocks) + self.other_flops

    @property
    def ea_flops(self):
        return self.vanilla_flops + self.conv_flops

    @property
    def flop_ratio(self):
        return self.ea_flops / self.vanilla_flops

    @property
    def flop_overhead_pct(self):
        return 100.0 * (self.ea_flops - self.vanilla_flops) / self.vanilla_flops

    @property
    def param_overhead_pct(self):
        return 100.0 * self.conv_params / self.vanilla_params

    def table(self):
        rows = [f"{'module':<28}{'params':>12}"]
        rows += [f"{k:<28}{v:>12d}" for k, v in self.params.items()]
        rows.append("")
        rows.append(f"{'attention':<28}{'vanilla FLOPs':>16}{'conv FLOPs':>14}{'conv params':>13}")
        for b in self.blocks:
            rows.append(f"{b['name']:<28}{b['vanilla_flops']:>16d}{b['conv_flops']:>14d}{b['conv_params']:>13d}")
        rows.append("")
        rows.append(f"params   vanilla={self.vanilla_params}  EA={self.ea_params}  "
                    f"overhead={self.param_overhead_pct:.4f}%")
        rows.append(f"FLOPs    vanilla={self.vanilla_flops}  EA={self.ea_flops}  "
                    f"ratio={self.flop_ratio:.6f}  overhead={self.flop_overhead_pct:.4f}%")
        return "\n".join(rows)

    def to_dict(self):
        return {
            "seq_len": self.seq_len,
            "params": dict(self.params),
            "blocks": list(self.blocks),
            "vanilla_params": self.vanilla_params,
            "ea_params": self.ea_params,
            "vanilla_flops": self.vanilla_flops,
            "ea_flops": self.ea_flops,
            "flop_overhead_pct": self.flop_overhead_pct,
        }


def conv_flops(n_q, n_k, n_heads, kernel_size):
    return 2 * n_q * n_k * n_heads * n_heads * kernel_size * kernel_size + n_q * n_k * n_heads


def _attention_flops(n_q, n_k, C, rows, n_tables):
    proj = 2 * n_q * C * C + 2 * 2 * n_k * C * C + 2 * n_q * C * C  # Q; K, V; output
    scores = 2 * n_q * n_k * C + 2 * n_q * n_k * C  # QK^T and AV summed over heads
    rel = n_tables * 2 * n_q * C * rows
    return proj + scores + rel


def count_costs(spec, seq_len):
    """Closed-form :class:`CostReport` for ``spec`` at sequence length ``seq_len``.

    For image models ``seq_len`` is ignored and ``H * W`` is used.
    """
    C, K, d, F = spec.d_model, spec.n_heads, spec.head_dim, spec.d_ff
    rows = 2 * spec.radius + 1
    n_tables = {"relative_1d": 1, "relative_2d": 2}.get(spec.positional, 0)
    if spec.kind == "image_classifier":
        H, W, ch = spec.image_shape
        seq_len = H * W
    report = CostReport(seq_len)
    p = report.params
    n = seq_len
    attn_core = 4 * C * C
    ffn = C * F + F + F * C + C
    ffn_flops = 2 * n * C * F + 2 * n * F * C

    def attention_block(name, attn_type, n_q, n_k, tables):
        cfg = spec.ea[attn_type]
        cp = conv_param_count(K, cfg.kernel_size) if cfg.conv_enabled else 0
        cf = conv_flops(n_q, n_k, K, cfg.kernel_size) if cfg.conv_enabled else 0
        report.blocks.append({"name": name, "vanilla_flops": _attention_flops(n_q, n_k, C, rows, tables),
                              "conv_flops": cf, "conv_params": cp})
        return attn_core + tables * rows * d + cp

    if spec.kind == "image_classifier":
        p["pixel_proj"] = ch * C + C
        outside = 2 * n * ch * C
    else:
        p["src_embed"] = spec.src_vocab * C
        outside = 0
    enc = 0
    for i in range(spec.n_enc_layers):
        enc += attention_block(f"enc.{i}.attn", "encoder", n, n, n_tables) + 4 * C + ffn
        report.blocks[-1]["vanilla_flops"] += ffn_flops
    p["encoder"] = enc
    if spec.kind == "seq2seq":
        p["tgt_embed"] = (spec.tgt_vocab + 1) * C
        dec = 0
        for i in range(spec.n_dec_layers):
            dec += attention_block(f"dec.{i}.self_attn", "decoder_self", n, n, n_tables)
            dec += attention_block(f"dec.{i}.cross_attn", "encoder_decoder", n, n, 0)
            report.blocks[-1]["vanilla_flops"] += ffn_flops
            dec += 6 * C + ffn
        p["decoder"] = dec
        p["head"] = C * spec.tgt_vocab + spec.tgt_vocab
        outside += 2 * n * C * spec.tgt_vocab
    else:
        p["head"] = C * spec.n_classes + spec.n_classes
        outside += 2 * C * spec.n_classes
    report.other_flops = outside
    return report
