"""Key=value experiment config files with include support."""

import os
from dataclasses import dataclass, fields

from .errors import ConfigError, InputError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class ExperimentConfig:
    # model
    variant: str = "med"
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 32
    d_ff: int = 128
    n_heads: int = 2
    dropout: float = 0.1
    mol_weight: float = 0.3
    label_smoothing: float = 0.1
    # training
    epochs: int = 20
    batch_frames: int = 1200
    lr_scale: float = 1.0
    warmup_steps: int = 400
    clip_norm: float = 5.0
    ckpt_every: int = 1
    augment: bool = True
    pretrain: str = "none"  # none | branches | combined
    # decoding
    beam: int = 10
    alpha: float = 0.3
    beta: float = 0.3
    # data generation
    d_feat: int = 20
    vocab_per_lang: int = 20
    n_mono: int = 2000
    n_cs_train: int = 2000
    n_cs_dev: int = 200
    n_eval: int = 300
    switch_prob: float = 0.3
    matrix_ratio: float = 0.69
    eval_a_ratio: float = 0.69
    eval_b_ratio: float = 0.71
    # misc
    seed: int = 0

    def model_config(self, vocab_size):
        return ModelConfig(
            variant=self.variant,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            d_model=self.d_model,
            d_ff=self.d_ff,
            n_heads=self.n_heads,
            vocab_size=vocab_size,
            d_feat=self.d_feat,
            dropout=self.dropout,
            mol_weight=self.mol_weight,
            label_smoothing=self.label_smoothing,
        )

    def train_config(self, seed=None):
        return TrainConfig(
            epochs=self.epochs,
            batch_frames=self.batch_frames,
            lr_scale=self.lr_scale,
            warmup_steps=self.warmup_steps,
            seed=self.seed if seed is None else seed,
            clip_norm=self.clip_norm,
            ckpt_every=self.ckpt_every,
            augment=self.augment,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_VALID_PRETRAIN = ("none", "branches", "combined")


def _parse_value(key, raw):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None


def _read_file(path, seen, out):
    path = os.path.abspath(path)
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    if path in seen:
        raise ConfigError(f"config include cycle through {path}")
    seen.add(path)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("include "):
                inc = text[len("include "):].strip()
                inc_path = os.path.join(os.path.dirname(path), inc)
                _read_file(inc_path, seen, out)
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {text!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            out[key] = _parse_value(key, raw)
    seen.discard(path)


def load_config(path, overrides=None):
    """Parse a key=value config file (with `include`) into ExperimentConfig.

    Later assignments win, included files are read in place, and any
    unknown key is rejected with its location.
    """
    values = {}
    _read_file(path, set(), values)
    if overrides:
        for key, val in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config override {key!r}")
            values[key] = _parse_value(key, str(val))
    cfg = ExperimentConfig(**values)
    if cfg.pretrain not in _VALID_PRETRAIN:
        raise ConfigError(
            f"pretrain must be one of {_VALID_PRETRAIN}, got {cfg.pretrain!r}"
        )
    return cfg
