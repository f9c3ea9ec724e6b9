"""Transformer building blocks.

Parameter groups are plain dataclasses of named tensors; every tensor is
registered in a flat dict (name -> Tensor) at construction time so models
can enumerate, checkpoint, and transplant by hierarchical name. All blocks
use pre-norm residuals.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    NEG_FILL,
    Tensor,
    accumulate_grad,
    add,
    add_const,
    concat_last_axis,
    conv2d,
    dropout,
    flatten_to_time,
    layer_norm,
    matmul,
    record_op,
    relu,
    scale,
    softmax,
    transpose,
)


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def make_param(reg, name, data, requires_grad=True):
    if name in reg:
        raise ContractError(f"duplicate parameter name {name!r}")
    t = Tensor(data, requires_grad=requires_grad, name=name)
    reg[name] = t
    return t


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


def make_layer_norm(reg, name, d):
    return LayerNormParams(
        gain=make_param(reg, f"{name}.gain", np.ones(d, dtype=np.float32)),
        bias=make_param(reg, f"{name}.bias", np.zeros(d, dtype=np.float32)),
    )


@dataclass
class MhaParams:
    heads: list  # [(wq, wk, wv)] per head, each (d_model, d_head)
    wo: Tensor  # (d_model, d_model)


def make_mha(reg, name, d_model, n_heads, rng):
    if d_model % n_heads != 0:
        raise ConfigError(
            f"d_model={d_model} is not divisible by {n_heads} heads"
        )
    d_head = d_model // n_heads
    heads = []
    for h in range(n_heads):
        heads.append(
            (
                make_param(reg, f"{name}.head{h}.wq", _xavier(rng, d_model, d_head)),
                make_param(reg, f"{name}.head{h}.wk", _xavier(rng, d_model, d_head)),
                make_param(reg, f"{name}.head{h}.wv", _xavier(rng, d_model, d_head)),
            )
        )
    wo = make_param(reg, f"{name}.wo", _xavier(rng, d_model, d_model))
    return MhaParams(heads=heads, wo=wo)


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def make_ffn(reg, name, d_model, d_ff, rng):
    return FfnParams(
        w1=make_param(reg, f"{name}.w1", _xavier(rng, d_model, d_ff)),
        b1=make_param(reg, f"{name}.b1", np.zeros(d_ff, dtype=np.float32)),
        w2=make_param(reg, f"{name}.w2", _xavier(rng, d_ff, d_model)),
        b2=make_param(reg, f"{name}.b2", np.zeros(d_model, dtype=np.float32)),
    )


@dataclass
class FrontendParams:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    proj_w: Tensor
    proj_b: Tensor
    channels: int


def make_frontend(reg, name, d_feat, d_model, rng):
    c = d_model
    f_out = math.ceil(math.ceil(d_feat / 2) / 2)
    return FrontendParams(
        k1=make_param(reg, f"{name}.conv1.kernel", _xavier(rng, 9, 9 * c, (c, 1, 3, 3))),
        b1=make_param(reg, f"{name}.conv1.bias", np.zeros(c, dtype=np.float32)),
        k2=make_param(
            reg, f"{name}.conv2.kernel", _xavier(rng, 9 * c, 9 * c, (c, c, 3, 3))
        ),
        b2=make_param(reg, f"{name}.conv2.bias", np.zeros(c, dtype=np.float32)),
        proj_w=make_param(reg, f"{name}.proj.weight", _xavier(rng, c * f_out, d_model)),
        proj_b=make_param(reg, f"{name}.proj.bias", np.zeros(d_model, dtype=np.float32)),
        channels=c,
    )


# ---------------------------------------------------------------------------
# functional pieces


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v with an optional boolean attend-mask.

    `mask` is (T_q, T_k); True marks positions the query may attend to.
    A query row with no allowed position has an undefined distribution,
    which is reported as a contract error rather than silently uniform.
    """
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise DimensionError(
                f"attention mask shape {mask.shape} does not match scores {scores.shape}"
            )
        if (~mask).all(axis=1).any():
            raise ContractError("attention mask leaves a query row fully masked")
        scores = add_const(scores, np.where(mask, 0.0, NEG_FILL))
    return matmul(softmax(scores), v)


def multi_head_attention(p, q_in, k_in, v_in, mask=None):
    """Concat of per-head scaled dot attentions, then the W^O projection."""
    outs = [
        scaled_dot_attention(matmul(q_in, wq), matmul(k_in, wk), matmul(v_in, wv), mask)
        for wq, wk, wv in p.heads
    ]
    return matmul(concat_last_axis(outs), p.wo)


def feed_forward(p, x):
    return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


def positional_encoding(t_len, d_model):
    """Sinusoidal table: even columns sin, odd columns cos."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding requires even d_model, got {d_model}")
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    idx = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * idx / d_model)
    pe = np.zeros((t_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(np.float32)


def downsampled_length(t_len):
    """Frames after the two stride-2 layers."""
    return math.ceil(math.ceil(t_len / 2) / 2)


def downsample_frontend(p, feats, rng=None, rate=0.0, training=False):
    """(T, d_feat) features -> (ceil(T/4), d_model) with positional encoding.

    Two stride-2 3x3 conv+relu layers over the (time, feature) plane, a
    linear projection to model width (scaled by sqrt(d_model) so the
    positional table does not swamp it), then the positional encoding.
    """
    if feats.data.ndim != 2 or feats.data.shape[0] == 0:
        raise ContractError(
            f"frontend expects a non-empty (T, d_feat) input, got {feats.data.shape}"
        )
    x = Tensor(feats.data[None, :, :])

    def bw(g):
        accumulate_grad(feats, g[0])

    x = record_op(x, (feats,), bw)
    h = relu(conv2d(x, p.k1, p.b1, stride=2))
    h = relu(conv2d(h, p.k2, p.b2, stride=2))
    h = flatten_to_time(h)
    h = scale(add(matmul(h, p.proj_w), p.proj_b), math.sqrt(p.proj_w.shape[1]))
    pe = positional_encoding(h.shape[0], h.shape[1])
    h = add_const(h, pe)
    if training and rate > 0.0:
        h = dropout(h, rate, rng, training)
    return h


@dataclass
class EncoderLayerParams:
    ln1: LayerNormParams
    mha: MhaParams
    ln2: LayerNormParams
    ffn: FfnParams


def make_encoder_layer(reg, name, d_model, d_ff, n_heads, rng):
    return EncoderLayerParams(
        ln1=make_layer_norm(reg, f"{name}.ln1", d_model),
        mha=make_mha(reg, f"{name}.mha", d_model, n_heads, rng),
        ln2=make_layer_norm(reg, f"{name}.ln2", d_model),
        ffn=make_ffn(reg, f"{name}.ffn", d_model, d_ff, rng),
    )


def encoder_layer(p, x, mask=None, rng=None, rate=0.0, training=False):
    """Pre-norm self-attention and feed-forward residual sub-layers."""
    h = layer_norm(x, p.ln1.gain, p.ln1.bias)
    a = multi_head_attention(p.mha, h, h, h, mask)
    if training and rate > 0.0:
        a = dropout(a, rate, rng, training)
    x = add(x, a)
    h = layer_norm(x, p.ln2.gain, p.ln2.bias)
    f = feed_forward(p.ffn, h)
    if training and rate > 0.0:
        f = dropout(f, rate, rng, training)
    return add(x, f)


def causal_mask(t_len):
    """Lower-triangular attend-mask for autoregressive self-attention."""
    return np.tril(np.ones((t_len, t_len), dtype=bool))
