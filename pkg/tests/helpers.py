"""Shared numeric test utilities."""

import numpy as np

from medtr.tensor import Tape, Tensor, accumulate_grad, record_op


def linear_readout(x, w):
    """Scalar sum(x * w) with constant weights w.

    A fixed random linear functional turns any op output into a
    non-degenerate scalar loss: its own gradient (w) is exact, so finite
    differences probe only the op under test.
    """
    w = np.asarray(w, dtype=np.float64)
    assert w.shape == x.data.shape
    val = float((x.data.astype(np.float64) * w).sum())
    out = Tensor(np.asarray(val, dtype=x.data.dtype))
    record_op(out, [x], lambda g: accumulate_grad(x, float(g) * w))
    return out


def fd_gradcheck(build_loss, arrays, eps=1e-3, rel_tol=1e-4, probes=None, rng=None):
    """Central finite differences against the tape gradient, in float64.

    `build_loss(tensors)` must return a scalar Tensor from the given list
    of leaf tensors. `probes` limits how many entries per array are
    checked (all by default). Returns the worst relative error.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(leaves)
        tape.backward(loss)
    worst = 0.0
    for ai, base in enumerate(arrays):
        grad = leaves[ai].grad
        assert grad is not None, f"no gradient for leaf {ai}"
        idxs = list(np.ndindex(base.shape)) if base.shape else [()]
        if probes is not None and len(idxs) > probes:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(idxs), size=probes, replace=False)
            idxs = [idxs[i] for i in pick]
        for idx in idxs:
            def at(delta):
                shifted = [a.copy() for a in arrays]
                shifted[ai][idx] += delta
                out = build_loss([Tensor(a) for a in shifted])
                return float(out.data)

            num = (at(eps) - at(-eps)) / (2.0 * eps)
            got = float(np.asarray(grad)[idx]) if base.shape else float(grad)
            scale = max(abs(num), abs(got), 1e-8)
            rel = abs(num - got) / scale
            worst = max(worst, rel)
            assert rel < rel_tol, (
                f"leaf {ai} index {idx}: analytic {got:.8g} vs numeric {num:.8g} "
                f"(rel {rel:.2e})"
            )
    return worst


def collapse_path(path, blank):
    """CTC path -> label sequence: merge repeats, then drop blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev:
            if s != blank:
                out.append(s)
            prev = s
    return tuple(out)


def ctc_brute_force(logp, labels, blank):
    """-log sum of path probabilities, by enumerating every path.

    Exponential in T so only usable for tiny lattices; this is the
    independent oracle the lattice recursion is checked against.
    """
    import itertools

    logp = np.asarray(logp, dtype=np.float64)
    t_max, vocab = logp.shape
    target = tuple(int(x) for x in labels)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_max):
        if collapse_path(path, blank) == target:
            total += float(np.exp(sum(logp[t, s] for t, s in enumerate(path))))
    if total == 0.0:
        return np.inf
    return -float(np.log(total))


def random_log_probs(rng, t_max, vocab):
    """Random (T, V) matrix of row log-distributions, float64."""
    logits = rng.normal(size=(t_max, vocab)) * 2.0
    logits -= np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(
        axis=1, keepdims=True)) + logits.max(axis=1, keepdims=True)
    return logits


def ref_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def token_pairs(vocab, ids):
    return [(vocab.tokens[i], vocab.lang_of(i)) for i in ids]
