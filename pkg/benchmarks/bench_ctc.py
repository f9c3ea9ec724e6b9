"""Benchmark the compiled CTC kernels against the numpy fallback.

Runs both backends on the same inputs, checks they agree, and reports
per-call timings plus the speedup. The two hot paths are the loss/gradient
lattice used in training and the prefix-scoring step used inside beam
search.

    python3 benchmarks/bench_ctc.py
    python3 benchmarks/bench_ctc.py --repeats 50
"""

import argparse
import time

import numpy as np

from medtr import ctc_numpy

try:
    from medtr import _ctc_ext
except ImportError:
    _ctc_ext = None


def random_log_probs(rng, t_max, vocab):
    logits = rng.normal(size=(t_max, vocab))
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return np.ascontiguousarray(logp, dtype=np.float64)


def random_labels(rng, n_lab, vocab, blank):
    ids = [i for i in range(vocab) if i != blank]
    labels = rng.choice(ids, size=n_lab)
    return np.ascontiguousarray(labels, dtype=np.int64)


def time_call(fn, repeats):
    # best-of-N wall time; one untimed warmup call
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_loss_grad(rng, t_max, vocab, n_lab, repeats):
    blank = vocab - 1
    logp = random_log_probs(rng, t_max, vocab)
    labels = random_labels(rng, n_lab, vocab, blank)

    loss_np, grad_np = ctc_numpy.ctc_loss_grad(logp, labels, blank)
    rows = []
    t_np = time_call(lambda: ctc_numpy.ctc_loss_grad(logp, labels, blank), repeats)
    rows.append(("numpy", t_np))
    if _ctc_ext is not None:
        loss_cy, grad_cy = _ctc_ext.ctc_loss_grad(logp, labels, blank)
        assert abs(loss_cy - loss_np) < 1e-10, "backends disagree on loss"
        assert np.abs(grad_cy - grad_np).max() < 1e-10, "backends disagree on grad"
        t_cy = time_call(lambda: _ctc_ext.ctc_loss_grad(logp, labels, blank), repeats)
        rows.append(("cython", t_cy))
    report(f"ctc_loss_grad  T={t_max} V={vocab} L={n_lab}", rows)


def bench_prefix_step(rng, t_max, vocab, n_cands, repeats):
    blank = vocab - 1
    logp = random_log_probs(rng, t_max, vocab)
    cands = np.ascontiguousarray(np.arange(n_cands), dtype=np.int64)
    # state after one real extension, as beam search would hold mid-decode
    r0 = ctc_numpy.ctc_prefix_initial(logp, blank)
    _, r_all = ctc_numpy.ctc_prefix_step(logp, blank, -1, 0, r0, cands[:1])
    r_prev = np.ascontiguousarray(r_all[0])
    args = (logp, blank, int(cands[0]), 1, r_prev, cands)

    psi_np, rn_np = ctc_numpy.ctc_prefix_step(*args)
    rows = []
    t_np = time_call(lambda: ctc_numpy.ctc_prefix_step(*args), repeats)
    rows.append(("numpy", t_np))
    if _ctc_ext is not None:
        psi_cy, rn_cy = _ctc_ext.ctc_prefix_step(*args)
        assert np.abs(psi_cy - psi_np).max() < 1e-10, "backends disagree on psi"
        ok = np.isclose(rn_cy, rn_np, atol=1e-10) | (
            np.isneginf(rn_cy) & np.isneginf(rn_np)
        )
        assert ok.all(), "backends disagree on lattice state"
        t_cy = time_call(lambda: _ctc_ext.ctc_prefix_step(*args), repeats)
        rows.append(("cython", t_cy))
    report(f"ctc_prefix_step  T={t_max} V={vocab} C={n_cands}", rows)


def report(title, rows):
    print(title)
    base = rows[0][1]
    for name, t in rows:
        extra = "" if t == base else f"  ({base / t:.1f}x vs numpy)"
        print(f"  {name:<7} {t * 1e6:10.1f} us/call{extra}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _ctc_ext is None:
        print("compiled extension not importable; timing numpy fallback only")
    rng = np.random.default_rng(args.seed)
    for t_max, vocab, n_lab in [(50, 44, 8), (120, 44, 16), (240, 88, 24)]:
        bench_loss_grad(rng, t_max, vocab, n_lab, args.repeats)
    for t_max, vocab, n_cands in [(50, 44, 43), (120, 44, 43), (240, 88, 87)]:
        bench_prefix_step(rng, t_max, vocab, n_cands, args.repeats)


if __name__ == "__main__":
    main()
