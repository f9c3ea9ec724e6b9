"""Pure-numpy CTC lattice kernels.

Two entry points shared with the compiled backend:

``ctc_loss_grad``
    Log-space forward lattice over the extended label sequence
    (blank, l1, blank, l2, ..., blank). The gradient is produced by a
    mechanical reverse sweep of that same recursion (reverse-mode
    differentiation of the forward pass), not by a separate backward
    lattice.

``ctc_prefix_step``
    One incremental prefix-scoring step: given the lattice state of a
    prefix, score every candidate extension and return the new states.
    State layout is (T, 2) with column 0 holding log-probabilities of
    paths ending in a non-blank and column 1 paths ending in blank.
"""

import numpy as np

from .errors import InfeasibleError, InputError

NEG_INF = -np.inf


def _validate_labels(labels, vocab, blank):
    if labels.size == 0:
        return
    if labels.min() < 0 or labels.max() >= vocab:
        raise InputError(
            f"ctc: label id out of range [0, {vocab}): min={labels.min()} max={labels.max()}"
        )
    if np.any(labels == blank):
        raise InputError(f"ctc: labels must not contain the blank id {blank}")


def ctc_loss_grad(logp, labels, blank, want_grad=True):
    """Negative log-likelihood of `labels` under frame log-probs `logp`.

    `logp` is (T, V) float64 (rows are log-distributions), `labels` an int
    vector without blanks. Returns (loss, grad) where grad is d(loss)/d(logp)
    of shape (T, V), or (loss, None) when `want_grad` is false.
    """
    logp = np.asarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    t_max, vocab = logp.shape
    _validate_labels(labels, vocab, blank)
    n_lab = labels.shape[0]
    reps = int(np.sum(labels[1:] == labels[:-1])) if n_lab > 1 else 0
    if t_max < n_lab + reps:
        raise InfeasibleError(
            f"ctc: {n_lab} labels with {reps} adjacent repeats need at least "
            f"{n_lab + reps} frames, got {t_max}"
        )

    s_len = 2 * n_lab + 1
    ext = np.full(s_len, blank, dtype=np.int64)
    ext[1::2] = labels
    # skip connection s-2 -> s allowed only for non-blank, non-repeated labels
    can_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_max, s_len), NEG_INF)
    merged = np.full((t_max, s_len), NEG_INF)  # log-sum over predecessors
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_max):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        m = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
            m = np.where(can_skip, np.logaddexp(m, skip), m)
        merged[t] = m
        alpha[t] = m + logp[t, ext]

    if s_len > 1:
        total = np.logaddexp(alpha[t_max - 1, s_len - 1], alpha[t_max - 1, s_len - 2])
    else:
        total = alpha[t_max - 1, s_len - 1]
    if total == NEG_INF:
        raise InfeasibleError("ctc: no feasible alignment (all paths have zero mass)")
    loss = -float(total)
    if not want_grad:
        return loss, None

    # Reverse sweep. bar[s] = d(loss)/d(alpha[t, s]); weights are bounded by
    # the path posteriors, so plain float64 is safe here.
    grad = np.zeros_like(logp)
    bar = np.zeros(s_len)
    bar[s_len - 1] = -np.exp(alpha[t_max - 1, s_len - 1] - total)
    if s_len > 1:
        bar[s_len - 2] = -np.exp(alpha[t_max - 1, s_len - 2] - total)
    for t in range(t_max - 1, 0, -1):
        np.add.at(grad[t], ext, bar)
        live = merged[t] != NEG_INF
        w = np.where(live, bar, 0.0)
        scale = np.where(live, merged[t], 0.0)
        prev = alpha[t - 1]
        nxt = np.zeros(s_len)
        # stay: alpha[t-1, s] feeds alpha[t, s]
        nxt += w * np.exp(np.where(live, prev - scale, NEG_INF))
        # step: alpha[t-1, s-1] feeds alpha[t, s]
        contrib = w[1:] * np.exp(
            np.where(live[1:], prev[:-1] - scale[1:], NEG_INF)
        )
        nxt[:-1] += contrib
        # skip: alpha[t-1, s-2] feeds alpha[t, s] where allowed
        if s_len > 2:
            ok = can_skip[2:] & live[2:]
            contrib = np.where(ok, w[2:], 0.0) * np.exp(
                np.where(ok, prev[:-2] - scale[2:], NEG_INF)
            )
            nxt[:-2] += contrib
        bar = nxt
    np.add.at(grad[0], ext, bar)
    return loss, grad


def ctc_prefix_initial(logp, blank):
    """Lattice state of the empty prefix: blanks only up to each frame."""
    logp = np.asarray(logp, dtype=np.float64)
    t_max = logp.shape[0]
    r = np.full((t_max, 2), NEG_INF)
    r[0, 1] = logp[0, blank]
    for t in range(1, t_max):
        r[t, 1] = r[t - 1, 1] + logp[t, blank]
    return r


def ctc_prefix_step(logp, blank, last, prefix_len, r_prev, cands):
    """Score every candidate extension of one prefix.

    `last` is the prefix's final token id (-1 for the empty prefix) and
    `prefix_len` its length in real tokens. Returns (psi, r_new) where
    psi[c] is the log prefix probability of prefix+cands[c] and r_new[c]
    its (T, 2) lattice state.
    """
    logp = np.asarray(logp, dtype=np.float64)
    cands = np.asarray(cands, dtype=np.int64)
    t_max = logp.shape[0]
    n_c = cands.shape[0]
    xs = logp[:, cands]  # (T, C)
    r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])  # (T,)
    log_phi = np.repeat(r_sum[:, None], n_c, axis=1)
    if prefix_len > 0 and last >= 0:
        same = cands == last
        if same.any():
            log_phi[:, same] = r_prev[:, 1][:, None]

    r_new = np.full((n_c, t_max, 2), NEG_INF)
    if prefix_len == 0:
        r_new[:, 0, 0] = xs[0]
    start = max(prefix_len, 1)
    psi = r_new[:, start - 1, 0].copy()
    blank_col = logp[:, blank]
    for t in range(start, t_max):
        r_new[:, t, 0] = np.logaddexp(r_new[:, t - 1, 0], log_phi[t - 1]) + xs[t]
        r_new[:, t, 1] = (
            np.logaddexp(r_new[:, t - 1, 0], r_new[:, t - 1, 1]) + blank_col[t]
        )
        psi = np.logaddexp(psi, log_phi[t - 1] + xs[t])
    return psi, r_new
