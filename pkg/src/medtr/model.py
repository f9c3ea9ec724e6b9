"""The four model variants.

baseline  single encoder, decoder with one cross-attention per layer
m_en      two encoders, shared decoder cross-attention scored against each
          encoder stream, residuals averaged
m_de      one encoder, two language-specific cross-attentions per decoder
          layer over the same stream, residuals averaged
med       two encoders + matched language-specific cross-attentions

Every parameter lives in a flat registry under a hierarchical name that is
stable across variants (single-branch components use the branch key
"shared", dual-branch ones "eng"/"man"), which is what makes checkpoint
transplant between variants a pure name-mapping exercise.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import blocks
from .blocks import FfnParams, LayerNormParams, MhaParams, causal_mask
from .errors import ConfigError, ContractError, InputError, TransplantError
from .rng import substream
from .tensor import (
    Tensor,
    add,
    add_const,
    dropout,
    embedding_lookup,
    layer_norm,
    log_softmax,
    matmul,
    mean_pair,
    scale,
)

VARIANTS = ("baseline", "m_en", "m_de", "med")
DUAL_BRANCHES = ("eng", "man")
SINGLE_BRANCH = ("shared",)


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    n_enc_layers: int
    n_dec_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    d_feat: int
    dropout: float = 0.1
    mol_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.mol_weight <= 1.0:
            raise ConfigError(f"mol_weight must be in [0, 1], got {self.mol_weight}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        for name in ("n_enc_layers", "n_dec_layers", "d_model", "d_ff", "n_heads",
                     "vocab_size", "d_feat"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1)")

    @property
    def dual_encoder(self):
        return self.variant in ("m_en", "med")

    @property
    def dual_cross(self):
        return self.variant in ("m_de", "med")

    @property
    def encoder_branches(self):
        return DUAL_BRANCHES if self.dual_encoder else SINGLE_BRANCH

    @property
    def cross_branches(self):
        return DUAL_BRANCHES if self.dual_cross else SINGLE_BRANCH

    @property
    def blank_id(self):
        # CTC blank sits one past the decoder vocabulary
        return self.vocab_size


def toy_config(variant, vocab_size, d_feat, **overrides):
    """Small config used throughout tests: N=2, M=2, d_model=32."""
    base = dict(
        variant=variant, n_enc_layers=2, n_dec_layers=2, d_model=32, d_ff=128,
        n_heads=2, vocab_size=vocab_size, d_feat=d_feat, dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def replace_variant(config, variant):
    """Same dimensions and knobs, different branch structure."""
    return replace(config, variant=variant)


def paper_config(variant, vocab_size, d_feat, **overrides):
    """Reference scale: N=12, M=6, d_model=256, d_ff=2048, H=4."""
    base = dict(
        variant=variant, n_enc_layers=12, n_dec_layers=6, d_model=256, d_ff=2048,
        n_heads=4, vocab_size=vocab_size, d_feat=d_feat, mol_weight=0.3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class CrossBranchParams:
    ln: LayerNormParams
    mha: MhaParams


@dataclass
class DecoderLayerParams:
    self_ln: LayerNormParams
    self_mha: MhaParams
    cross: dict  # branch key -> CrossBranchParams
    ffn_ln: LayerNormParams
    ffn: FfnParams


@dataclass
class MedParams:
    config: ModelConfig
    registry: dict  # name -> Tensor, insertion-ordered
    frontends: dict  # branch -> FrontendParams
    encoders: dict  # branch -> [EncoderLayerParams]
    enc_final_ln: dict  # branch -> LayerNormParams
    embed: Tensor
    dec_layers: list
    dec_final_ln: LayerNormParams
    out_w: Tensor
    out_b: Tensor
    ctc_w: Tensor
    ctc_b: Tensor

    def parameters(self):
        return self.registry.values()

    def named_parameters(self):
        return self.registry.items()

    def zero_grad(self):
        for t in self.registry.values():
            t.grad = None

    def state_arrays(self):
        """name -> float32 array view of current values."""
        return {k: v.data for k, v in self.registry.items()}


def build_model(config, seed):
    """Deterministically initialize all parameters for `config`."""
    rng = substream(seed, "init")
    reg = {}
    frontends, encoders, finals = {}, {}, {}
    for b in config.encoder_branches:
        frontends[b] = blocks.make_frontend(
            reg, f"enc.{b}.frontend", config.d_feat, config.d_model, rng
        )
        encoders[b] = [
            blocks.make_encoder_layer(
                reg, f"enc.{b}.layer{i}", config.d_model, config.d_ff, config.n_heads, rng
            )
            for i in range(config.n_enc_layers)
        ]
        finals[b] = blocks.make_layer_norm(reg, f"enc.{b}.final_ln", config.d_model)

    embed = blocks.make_param(
        reg,
        "dec.embed.weight",
        blocks._xavier(rng, config.vocab_size, config.d_model),
    )
    dec_layers = []
    for i in range(config.n_dec_layers):
        self_ln = blocks.make_layer_norm(reg, f"dec.layer{i}.self_ln", config.d_model)
        self_mha = blocks.make_mha(
            reg, f"dec.layer{i}.self_mha", config.d_model, config.n_heads, rng
        )
        cross = {}
        for c in config.cross_branches:
            cross[c] = CrossBranchParams(
                ln=blocks.make_layer_norm(reg, f"dec.layer{i}.cross.{c}.ln", config.d_model),
                mha=blocks.make_mha(
                    reg, f"dec.layer{i}.cross.{c}.mha", config.d_model, config.n_heads, rng
                ),
            )
        ffn_ln = blocks.make_layer_norm(reg, f"dec.layer{i}.ffn_ln", config.d_model)
        ffn = blocks.make_ffn(reg, f"dec.layer{i}.ffn", config.d_model, config.d_ff, rng)
        dec_layers.append(
            DecoderLayerParams(
                self_ln=self_ln, self_mha=self_mha, cross=cross, ffn_ln=ffn_ln, ffn=ffn
            )
        )
    dec_final_ln = blocks.make_layer_norm(reg, "dec.final_ln", config.d_model)
    out_w = blocks.make_param(
        reg, "dec.out.weight", blocks._xavier(rng, config.d_model, config.vocab_size)
    )
    out_b = blocks.make_param(
        reg, "dec.out.bias", np.zeros(config.vocab_size, dtype=np.float32)
    )
    ctc_w = blocks.make_param(
        reg, "ctc.proj.weight", blocks._xavier(rng, config.d_model, config.vocab_size + 1)
    )
    ctc_b = blocks.make_param(
        reg, "ctc.proj.bias", np.zeros(config.vocab_size + 1, dtype=np.float32)
    )
    return MedParams(
        config=config, registry=reg, frontends=frontends, encoders=encoders,
        enc_final_ln=finals, embed=embed, dec_layers=dec_layers,
        dec_final_ln=dec_final_ln, out_w=out_w, out_b=out_b, ctc_w=ctc_w, ctc_b=ctc_b,
    )


@dataclass
class EncoderOutputs:
    branches: dict  # branch key -> (T', d_model) post-norm stream
    pre_norm: dict  # branch key -> (T', d_model) stream before the final norm
    t_len: int


def encode(params, features, rng=None, training=False):
    """Run every encoder branch over the same feature sequence."""
    config = params.config
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.data.ndim != 2 or features.data.shape[0] == 0:
        raise ContractError(
            f"encode expects a non-empty (T, d_feat) input, got {features.data.shape}"
        )
    if features.data.shape[1] != config.d_feat:
        raise ContractError(
            f"encode: feature width {features.data.shape[1]} != d_feat {config.d_feat}"
        )
    rate = config.dropout if training else 0.0
    branches, pre = {}, {}
    for b in config.encoder_branches:
        h = blocks.downsample_frontend(
            params.frontends[b], features, rng=rng, rate=rate, training=training
        )
        for layer in params.encoders[b]:
            h = blocks.encoder_layer(layer, h, rng=rng, rate=rate, training=training)
        pre[b] = h
        fln = params.enc_final_ln[b]
        branches[b] = layer_norm(h, fln.gain, fln.bias)
    t_len = next(iter(branches.values())).shape[0]
    return EncoderOutputs(branches=branches, pre_norm=pre, t_len=t_len)


def decode_step_fusion(undlyr, enc, cross, rng=None, rate=0.0, training=False):
    """Language-specific residual cross-attention, averaged.

    Per branch: query = branch layer-norm of the self-attention output,
    keys/values = that branch's encoder stream, residual = input + MHA
    output. Two residuals are averaged; one passes through unchanged.
    Branch pairing covers all variants: matched keys for med, one shared
    cross-attention scored per encoder stream for m_en/baseline, both
    cross-attentions over the single stream for m_de.
    """
    enc_keys = list(enc.branches)
    cross_keys = list(cross)
    if len(cross_keys) == 1:
        pairs = [(cross_keys[0], e) for e in enc_keys]
    elif len(enc_keys) == 1:
        pairs = [(c, enc_keys[0]) for c in cross_keys]
    else:
        if set(cross_keys) != set(enc_keys):
            raise ContractError(
                f"fusion branches {sorted(cross_keys)} do not match encoder "
                f"branches {sorted(enc_keys)}"
            )
        pairs = [(c, c) for c in cross_keys]

    residuals = []
    for ckey, ekey in pairs:
        branch = cross[ckey]
        q = layer_norm(undlyr, branch.ln.gain, branch.ln.bias)
        kv = enc.branches[ekey]
        a = blocks.multi_head_attention(branch.mha, q, kv, kv)
        if training and rate > 0.0:
            a = dropout(a, rate, rng, training)
        residuals.append(add(undlyr, a))
    if len(residuals) == 1:
        return residuals[0]
    if len(residuals) != 2:
        raise ContractError(f"expected at most two fusion branches, got {len(residuals)}")
    return mean_pair(residuals[0], residuals[1])


def forward_decoder(params, config, enc, targets_in, rng=None, training=False):
    """Teacher-forced decoder pass; returns (l, vocab) logits."""
    ids = np.asarray(targets_in)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError(f"forward_decoder expects a non-empty 1-d id sequence")
    if ids.dtype.kind not in "iu":
        raise InputError("forward_decoder: target ids must be integers")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(
            f"forward_decoder: token id out of range [0, {config.vocab_size}): "
            f"min={ids.min()} max={ids.max()}"
        )
    rate = config.dropout if training else 0.0
    x = scale(embedding_lookup(params.embed, ids), math.sqrt(config.d_model))
    x = add_const(x, blocks.positional_encoding(len(ids), config.d_model))
    if training and rate > 0.0:
        x = dropout(x, rate, rng, training)
    mask = causal_mask(len(ids))
    for layer in params.dec_layers:
        h = layer_norm(x, layer.self_ln.gain, layer.self_ln.bias)
        a = blocks.multi_head_attention(layer.self_mha, h, h, h, mask)
        if training and rate > 0.0:
            a = dropout(a, rate, rng, training)
        x = add(x, a)
        x = decode_step_fusion(x, enc, layer.cross, rng=rng, rate=rate, training=training)
        h = layer_norm(x, layer.ffn_ln.gain, layer.ffn_ln.bias)
        f = blocks.feed_forward(layer.ffn, h)
        if training and rate > 0.0:
            f = dropout(f, rate, rng, training)
        x = add(x, f)
    x = layer_norm(x, params.dec_final_ln.gain, params.dec_final_ln.bias)
    return add(matmul(x, params.out_w), params.out_b)


def ctc_head(params, config, enc):
    """Frame log-probs over vocab+blank from the summed encoder streams."""
    streams = [enc.branches[b] for b in config.encoder_branches]
    s = streams[0] if len(streams) == 1 else add(streams[0], streams[1])
    return log_softmax(add(matmul(s, params.ctc_w), params.ctc_b))


# ---------------------------------------------------------------------------
# transplant


def transplant(params, archive, name_map):
    """Copy archive tensors into model parameters; returns tensors loaded.

    `name_map` maps archive names to model parameter names. Unmapped model
    parameters keep their current values.
    """
    count = 0
    for src, dst in name_map.items():
        if src not in archive:
            raise TransplantError(f"checkpoint does not contain tensor {src!r}")
        if dst not in params.registry:
            raise TransplantError(f"model has no parameter named {dst!r}")
        src_arr = archive[src]
        tgt = params.registry[dst]
        if tuple(src_arr.shape) != tuple(tgt.data.shape):
            raise TransplantError(
                f"shape mismatch for {dst!r}: checkpoint {tuple(src_arr.shape)} "
                f"vs model {tuple(tgt.data.shape)}"
            )
        tgt.data[...] = src_arr.astype(np.float32)
        count += 1
    return count


def branch_transplant_map(params, branch):
    """Archive->model name map loading a monolingual checkpoint into `branch`.

    Covers the branch's full encoder stack (frontend, layers, final norm)
    and each decoder layer's cross-attention (with its pre-norm) for that
    branch; the source is a single-encoder model whose branch key is
    "shared".
    """
    if branch not in DUAL_BRANCHES:
        raise ContractError(f"transplant branch must be one of {DUAL_BRANCHES}, got {branch!r}")
    mapping = {}
    enc_prefix = f"enc.{branch}."
    for name in params.registry:
        if name.startswith(enc_prefix):
            mapping["enc.shared." + name[len(enc_prefix):]] = name
            continue
        parts = name.split(".")
        # dec.layer{i}.cross.{branch}.<rest>
        if (
            len(parts) >= 5
            and parts[0] == "dec"
            and parts[2] == "cross"
            and parts[3] == branch
        ):
            src = ".".join(parts[:3] + ["shared"] + parts[4:])
            mapping[src] = name
    return mapping
