"""Backend selection for the CTC kernels.

The compiled extension is preferred when importable; the numpy fallback is
always available. Set ``MEDTR_PURE_PY=1`` to force the fallback. Both
backends implement the same two functions with identical semantics, and the
test suite cross-checks them.
"""

import os

import numpy as np

from . import ctc_numpy
from .ctc_numpy import ctc_prefix_initial  # numpy-only helper, cheap

if os.environ.get("MEDTR_PURE_PY") == "1":
    _impl = ctc_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _ctc_ext as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = ctc_numpy
        BACKEND = "numpy"


def ctc_loss_grad(logp, labels, blank, want_grad=True):
    """Dispatch to the active backend; see medtr.ctc_numpy.ctc_loss_grad."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _impl.ctc_loss_grad(logp, labels, int(blank), want_grad)


def ctc_prefix_step(logp, blank, last, prefix_len, r_prev, cands):
    """Dispatch to the active backend; see medtr.ctc_numpy.ctc_prefix_step."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    r_prev = np.ascontiguousarray(r_prev, dtype=np.float64)
    cands = np.ascontiguousarray(cands, dtype=np.int64)
    return _impl.ctc_prefix_step(
        logp, int(blank), int(last), int(prefix_len), r_prev, cands
    )


__all__ = ["BACKEND", "ctc_loss_grad", "ctc_prefix_initial", "ctc_prefix_step"]
