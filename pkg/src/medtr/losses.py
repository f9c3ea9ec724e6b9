"""Training objectives: CTC, label-smoothed attention loss, and their mix."""

from dataclasses import dataclass

import numpy as np

from . import ctc_core
from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor, accumulate_grad, add, log_softmax, record_op, scale


def ctc_loss(log_probs, labels):
    """-log P(labels | frames) summed over all CTC alignments.

    `log_probs` is a (T', V+1) tensor of frame log-distributions with the
    blank in the last column. Normalized per utterance (no division by T'
    or label count). Differentiable through the tape: the lattice kernel
    returns the gradient with respect to `log_probs` alongside the loss.
    """
    if log_probs.data.ndim != 2:
        raise ContractError(f"ctc_loss expects (T', V+1) log-probs, got {log_probs.data.shape}")
    blank = log_probs.data.shape[1] - 1
    labels = np.asarray(labels, dtype=np.int64)
    want_grad = log_probs.requires_grad or log_probs._tracked
    loss_val, grad = ctc_core.ctc_loss_grad(log_probs.data, labels, blank, want_grad)
    out = Tensor(np.asarray(loss_val, dtype=log_probs.data.dtype))

    def bw(g):
        accumulate_grad(log_probs, grad * float(g))

    return record_op(out, (log_probs,), bw)


def attention_loss(logits, targets_out, smoothing=0.1, pad_id=None):
    """Mean per-token KL from the smoothed target one-hots to the prediction.

    The smoothed target puts 1-smoothing on the reference token and spreads
    smoothing over the other V-1 classes. With smoothing=0 this is the
    ordinary cross-entropy. Positions whose target equals `pad_id` are
    excluded from the mean.
    """
    ids = np.asarray(targets_out)
    if logits.data.ndim != 2:
        raise ContractError(f"attention_loss expects (l, V) logits, got {logits.data.shape}")
    if ids.ndim != 1 or ids.shape[0] != logits.data.shape[0]:
        raise ContractError(
            f"targets length {ids.shape} does not match logits rows {logits.data.shape[0]}"
        )
    n_cls = logits.data.shape[1]
    keep = np.ones(ids.shape[0], dtype=bool) if pad_id is None else ids != pad_id
    n_tok = int(keep.sum())
    if n_tok == 0:
        raise ContractError("attention_loss: every position is padding")
    if ids[keep].min() < 0 or ids[keep].max() >= n_cls:
        raise InputError(
            f"attention_loss: target id out of range [0, {n_cls})"
        )
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")

    q = np.zeros(logits.data.shape, dtype=np.float64)
    rows = np.nonzero(keep)[0]
    q[rows, :] = smoothing / (n_cls - 1)
    q[rows, ids[rows]] = 1.0 - smoothing
    # sum q ln q with the 0 ln 0 := 0 convention
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(q > 0.0, q * np.log(q), 0.0).sum()

    logp = log_softmax(logits)
    val = (ent - (q * logp.data.astype(np.float64)).sum()) / n_tok
    out = Tensor(np.asarray(val, dtype=logits.data.dtype))

    def bw(g):
        accumulate_grad(logp, (-q / n_tok) * float(g))

    return record_op(out, (logp,), bw)


@dataclass
class MolLoss:
    total: Tensor
    ctc_part: Tensor
    att_part: Tensor
    lam: float


def mol_loss(ctc_part, att_part, lam):
    """total = lam * ctc_part + (1 - lam) * att_part."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mol weight must be in [0, 1], got {lam}")
    if lam == 0.0:
        total = att_part
    elif lam == 1.0:
        total = ctc_part
    else:
        total = add(scale(ctc_part, lam), scale(att_part, 1.0 - lam))
    return MolLoss(total=total, ctc_part=ctc_part, att_part=att_part, lam=lam)
