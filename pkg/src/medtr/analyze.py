"""Per-encoder activation statistics for dual-branch checkpoints."""

import numpy as np

from . import model as med_model
from .errors import ContractError
from .tensor import Tensor


def branch_streams(params, features):
    """Final-layer encoder outputs per branch, before the output LayerNorm.

    The post-norm stream is unit-variance by construction, so the contrast
    between branches lives in the pre-norm activations.
    """
    config = params.config
    if not config.dual_encoder:
        raise ContractError(
            f"variant {config.variant!r} has a single encoder; "
            "activation contrast needs two branches"
        )
    enc = med_model.encode(params, features)
    return {br: enc.pre_norm[br].data.astype(np.float64) for br in config.encoder_branches}


def standardize_streams(streams):
    """Standardize both branches with shared per-utterance statistics.

    Joint mean/std over the two streams together keeps the branches
    comparable; per-branch standardization would erase the contrast.
    """
    stacked = np.concatenate([streams[k].ravel() for k in sorted(streams)])
    mean = stacked.mean()
    std = stacked.std()
    if std == 0.0:
        raise ContractError("constant encoder activations; nothing to standardize")
    return {k: (v - mean) / std for k, v in streams.items()}


def per_frame_variance_mean(stream):
    """Mean over frames of the per-frame variance across channels."""
    return float(stream.var(axis=1).mean())


def utterance_stats(params, features):
    """Per-branch summary: mean per-frame output variance, standardized."""
    streams = standardize_streams(branch_streams(params, features))
    return {br: per_frame_variance_mean(v) for br, v in streams.items()}


def analysis_rows(params, features):
    """Plot-ready rows (frame, channel, value, encoder) for one utterance.

    Row count is 2 * T' * d_model: every standardized activation of both
    branches.
    """
    streams = standardize_streams(branch_streams(params, features))
    rows = []
    for branch in sorted(streams):
        arr = streams[branch]
        t_len, d = arr.shape
        for t in range(t_len):
            for c in range(d):
                rows.append((t, c, float(arr[t, c]), branch))
    return rows


def write_analysis_csv(path, params, corpus, summary_path=None):
    """Export standardized activations and per-branch variance summaries."""
    lines = ["utt_id,frame,channel,value,encoder\n"]
    summaries = []
    for utt in corpus:
        feats = Tensor(utt.features)
        for t, c, v, br in analysis_rows(params, feats):
            lines.append(f"{utt.utt_id},{t},{c},{v:.6g},{br}\n")
        stats = utterance_stats(params, feats)
        summaries.append((utt.utt_id, stats))
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    if summary_path:
        with open(summary_path, "w", encoding="utf-8") as fh:
            branches = sorted(summaries[0][1]) if summaries else []
            fh.write("utt_id," + ",".join(f"var_{b}" for b in branches) + "\n")
            for utt_id, stats in summaries:
                vals = ",".join(f"{stats[b]:.6g}" for b in branches)
                fh.write(f"{utt_id},{vals}\n")
    return summaries


def matched_branch_fraction(params, corpus, branch_of_lang):
    """Fraction of utterances whose matched branch has larger variance.

    Each utterance's language picks its branch via `branch_of_lang`; the
    statistic is the mean per-frame output variance after joint
    standardization.
    """
    wins = 0
    for utt in corpus:
        stats = utterance_stats(params, Tensor(utt.features))
        matched = branch_of_lang[utt.matrix_lang]
        others = [v for b, v in stats.items() if b != matched]
        if stats[matched] > max(others):
            wins += 1
    return wins / len(corpus)
