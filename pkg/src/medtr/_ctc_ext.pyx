# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC lattice kernels; semantics match medtr.ctc_numpy exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log

from .errors import InfeasibleError, InputError

cnp.import_array()

cdef double NEG_INF = -INFINITY


cdef inline double _lae(double a, double b) noexcept nogil:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    cdef double m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


def ctc_loss_grad(double[:, ::1] logp, long[::1] labels, long blank, bint want_grad=True):
    cdef Py_ssize_t t_max = logp.shape[0]
    cdef Py_ssize_t vocab = logp.shape[1]
    cdef Py_ssize_t n_lab = labels.shape[0]
    cdef Py_ssize_t i, t, s, reps = 0

    for i in range(n_lab):
        if labels[i] < 0 or labels[i] >= vocab:
            raise InputError(
                f"ctc: label id out of range [0, {vocab}): got {labels[i]}"
            )
        if labels[i] == blank:
            raise InputError(f"ctc: labels must not contain the blank id {blank}")
        if i > 0 and labels[i] == labels[i - 1]:
            reps += 1
    if t_max < n_lab + reps:
        raise InfeasibleError(
            f"ctc: {n_lab} labels with {reps} adjacent repeats need at least "
            f"{n_lab + reps} frames, got {t_max}"
        )

    cdef Py_ssize_t s_len = 2 * n_lab + 1
    ext_arr = np.full(s_len, blank, dtype=np.int64)
    ext_arr[1::2] = np.asarray(labels)
    cdef long[::1] ext = ext_arr
    skip_arr = np.zeros(s_len, dtype=np.uint8)
    cdef unsigned char[::1] can_skip = skip_arr
    for s in range(2, s_len):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            can_skip[s] = 1

    alpha_arr = np.full((t_max, s_len), NEG_INF)
    merged_arr = np.full((t_max, s_len), NEG_INF)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] merged = merged_arr
    cdef double m

    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_max):
        for s in range(s_len):
            m = alpha[t - 1, s]
            if s >= 1:
                m = _lae(m, alpha[t - 1, s - 1])
            if s >= 2 and can_skip[s]:
                m = _lae(m, alpha[t - 1, s - 2])
            merged[t, s] = m
            alpha[t, s] = m + logp[t, ext[s]]

    cdef double total = alpha[t_max - 1, s_len - 1]
    if s_len > 1:
        total = _lae(total, alpha[t_max - 1, s_len - 2])
    if total == NEG_INF:
        raise InfeasibleError("ctc: no feasible alignment (all paths have zero mass)")
    cdef double loss = -total
    if not want_grad:
        return loss, None

    grad_arr = np.zeros((t_max, vocab))
    cdef double[:, ::1] grad = grad_arr
    bar_arr = np.zeros(s_len)
    nxt_arr = np.zeros(s_len)
    cdef double[::1] bar = bar_arr
    cdef double[::1] nxt = nxt_arr
    cdef double w

    bar[s_len - 1] = -exp(alpha[t_max - 1, s_len - 1] - total)
    if s_len > 1:
        bar[s_len - 2] = -exp(alpha[t_max - 1, s_len - 2] - total)
    for t in range(t_max - 1, 0, -1):
        for s in range(s_len):
            grad[t, ext[s]] += bar[s]
            nxt[s] = 0.0
        for s in range(s_len):
            w = bar[s]
            if w == 0.0 or merged[t, s] == NEG_INF:
                continue
            m = merged[t, s]
            if alpha[t - 1, s] != NEG_INF:
                nxt[s] += w * exp(alpha[t - 1, s] - m)
            if s >= 1 and alpha[t - 1, s - 1] != NEG_INF:
                nxt[s - 1] += w * exp(alpha[t - 1, s - 1] - m)
            if s >= 2 and can_skip[s] and alpha[t - 1, s - 2] != NEG_INF:
                nxt[s - 2] += w * exp(alpha[t - 1, s - 2] - m)
        for s in range(s_len):
            bar[s] = nxt[s]
    for s in range(s_len):
        grad[0, ext[s]] += bar[s]
    return loss, grad_arr


def ctc_prefix_step(
    double[:, ::1] logp,
    long blank,
    long last,
    long prefix_len,
    double[:, ::1] r_prev,
    long[::1] cands,
):
    cdef Py_ssize_t t_max = logp.shape[0]
    cdef Py_ssize_t n_c = cands.shape[0]
    cdef Py_ssize_t c, t

    r_sum_arr = np.empty(t_max)
    cdef double[::1] r_sum = r_sum_arr
    for t in range(t_max):
        r_sum[t] = _lae(r_prev[t, 0], r_prev[t, 1])

    psi_arr = np.empty(n_c)
    r_new_arr = np.full((n_c, t_max, 2), NEG_INF)
    cdef double[::1] psi = psi_arr
    cdef double[:, :, ::1] r_new = r_new_arr
    cdef Py_ssize_t start = prefix_len if prefix_len > 1 else 1
    cdef double phi, p, rn, rb

    for c in range(n_c):
        if prefix_len == 0:
            r_new[c, 0, 0] = logp[0, cands[c]]
        p = r_new[c, start - 1, 0]
        for t in range(start, t_max):
            if prefix_len > 0 and cands[c] == last:
                phi = r_prev[t - 1, 1]
            else:
                phi = r_sum[t - 1]
            rn = r_new[c, t - 1, 0]
            rb = r_new[c, t - 1, 1]
            r_new[c, t, 0] = _lae(rn, phi) + logp[t, cands[c]]
            r_new[c, t, 1] = _lae(rn, rb) + logp[t, blank]
            p = _lae(p, phi + logp[t, cands[c]])
        psi[c] = p
    return psi_arr, r_new_arr
