"""Reverse-mode autodiff over numpy arrays.

Values are stored in float32; gradient-check code may build float64 tensors
and every op follows the input dtype. Reductions (softmax normalizers,
layer-norm statistics, sums/means) accumulate in float64 regardless of the
storage dtype.

Ops execute eagerly. When a :class:`Tape` is active and any input is tracked,
the op appends (output, backward_closure) to the tape; eager order is a
topological order, so ``Tape.backward`` just walks the list in reverse.
Intermediate gradients are consumed during the walk while leaf parameters
accumulate across repeated backward calls.
"""

import math
import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError, InputError

# Additive mask fill value. Finite on purpose: -inf logits would poison the
# non-finiteness guards downstream, and exp(-1e30 + max_shift) underflows to
# exactly 0.0 in both float32 and float64 anyway.
NEG_FILL = -1e30

_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Tape:
    """Records ops for one forward pass; context manager."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out, backward):
        out._tracked = True
        self._nodes.append((out, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

        `loss` must be a scalar. Calling twice on the same tape adds the
        gradients again (leaf grads accumulate; intermediates are consumed
        during each walk).
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor")
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        seed = np.ones((), dtype=loss.data.dtype)
        if loss.grad is None:
            loss.grad = seed
        else:
            loss.grad = loss.grad + seed
        for out, bw in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            bw(g)
            if not out.requires_grad:
                out.grad = None


def record_op(out, inputs, backward):
    """Attach `backward` to the active tape if any input is tracked."""
    tape = _current_tape()
    if tape is not None and any(
        isinstance(t, Tensor) and (t.requires_grad or t._tracked) for t in inputs
    ):
        tape.record(out, backward)
    return out


def _needs(t):
    return t.requires_grad or t._tracked


def accumulate_grad(t, g):
    """Add `g` into ``t.grad`` (allocating on first use)."""
    if not _needs(t):
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ContractError(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    """`a + b`. Shapes must match exactly, or `b` is a bias over the last axis."""
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)

        def bw(g):
            accumulate_grad(a, g)
            accumulate_grad(b, g)

        return record_op(out, (a, b), bw)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        out = Tensor(a.data + b.data)

        def bw(g):
            accumulate_grad(a, g)
            g64 = g.astype(np.float64)
            accumulate_grad(b, g64.reshape(-1, g.shape[-1]).sum(axis=0))

        return record_op(out, (a, b), bw)
    raise DimensionError(
        f"add: incompatible shapes {a.data.shape} and {b.data.shape} "
        "(only exact match or last-axis bias is supported)"
    )


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))

    def bw(g):
        accumulate_grad(a, g * np.asarray(s, dtype=g.dtype))

    return record_op(out, (a,), bw)


def add_const(a, c):
    """Add a non-differentiable array (masks, positional tables)."""
    c = np.asarray(c, dtype=a.data.dtype)
    out_data = a.data + c
    if out_data.shape != a.data.shape:
        raise DimensionError(
            f"add_const: constant of shape {c.shape} changes operand shape {a.data.shape}"
        )
    out = Tensor(out_data)

    def bw(g):
        accumulate_grad(a, g)

    return record_op(out, (a,), bw)


def relu(a):
    out = Tensor(np.maximum(a.data, 0))

    def bw(g):
        accumulate_grad(a, g * (a.data > 0))

    return record_op(out, (a,), bw)


def mean_pair(a, b):
    """Elementwise (a + b) / 2. mean_pair(x, x) is bitwise x."""
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"mean_pair: shapes {a.data.shape} and {b.data.shape} differ"
        )
    out = Tensor((a.data + b.data) * np.asarray(0.5, dtype=a.data.dtype))

    def bw(g):
        half = g * np.asarray(0.5, dtype=g.dtype)
        accumulate_grad(a, half)
        accumulate_grad(b, half)

    return record_op(out, (a, b), bw)


def concat_last_axis(tensors):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_last_axis: empty input list")
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise DimensionError(
                "concat_last_axis: leading dimensions differ: "
                f"{lead} vs {t.data.shape[:-1]}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    widths = [t.data.shape[-1] for t in tensors]

    def bw(g):
        offset = 0
        for t, w in zip(tensors, widths):
            accumulate_grad(t, g[..., offset : offset + w])
            offset += w

    return record_op(out, tuple(tensors), bw)


def embedding_lookup(table, ids):
    """Row gather: table is (V, d), ids an int array of row indices."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError("embedding_lookup: ids must be integers")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(
            f"embedding_lookup: id out of range [0, {vocab}): "
            f"min={ids.min()} max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bw(g):
        dt = np.zeros_like(table.data, dtype=np.float64)
        np.add.at(dt, ids, g.astype(np.float64))
        accumulate_grad(table, dt)

    return record_op(out, (table,), bw)


def dropout(a, rate, rng, training=True):
    """Inverted dropout; identity when not training or rate == 0."""
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    mask = keep / np.asarray(1.0 - rate, dtype=a.data.dtype)
    out = Tensor(a.data * mask)

    def bw(g):
        accumulate_grad(a, g * mask)

    return record_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return record_op(out, (a, b), bw)


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def bw(g):
        accumulate_grad(a, np.ascontiguousarray(g.T))

    return record_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalizations


def softmax(a):
    """Softmax over the last axis, with max subtraction; rows sum to 1."""
    x = a.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(a.data.dtype)
    out = Tensor(y)

    def bw(g):
        g64 = g.astype(np.float64)
        inner = (g64 * y64).sum(axis=-1, keepdims=True)
        accumulate_grad(a, y64 * (g64 - inner))

    return record_op(out, (a,), bw)


def log_softmax(a):
    x = a.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y64 = shifted - lse
    out = Tensor(y64.astype(a.data.dtype))

    def bw(g):
        g64 = g.astype(np.float64)
        accumulate_grad(a, g64 - np.exp(y64) * g64.sum(axis=-1, keepdims=True))

    return record_op(out, (a,), bw)


def layer_norm(a, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gain.data.astype(np.float64) * xhat + bias.data.astype(np.float64)
    out = Tensor(y.astype(a.data.dtype))

    def bw(g):
        g64 = g.astype(np.float64)
        lead = (-1, d)
        accumulate_grad(gain, (g64 * xhat).reshape(lead).sum(axis=0))
        accumulate_grad(bias, g64.reshape(lead).sum(axis=0))
        dxhat = g64 * gain.data.astype(np.float64)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        accumulate_grad(a, dx)

    return record_op(out, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# convolution frontend


def _same_pad(size, stride, k):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x, kernel, bias=None, stride=2):
    """Cross-correlation with zero 'same' padding and ceil output sizes.

    `x` is (c_in, H, W), `kernel` is (c_out, c_in, kh, kw), optional `bias`
    is (c_out,) added per output channel. Output is (c_out, ceil(H/stride),
    ceil(W/stride)).
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (c_in,H,W) and (c_out,c_in,kh,kw), "
            f"got {x.data.shape} and {kernel.data.shape}"
        )
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d: kernel expects {kc} input channels, input has {c_in}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise DimensionError(
            f"conv2d: bias must have shape ({c_out},), got {bias.data.shape}"
        )
    oh, ph_lo, ph_hi = _same_pad(h, stride, kh)
    ow, pw_lo, pw_hi = _same_pad(w, stride, kw)
    xp = np.pad(x.data, ((0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi)))
    sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(c_in, oh, ow, kh, kw),
        strides=(sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    # (oh*ow, c_in*kh*kw) @ (c_in*kh*kw, c_out)
    patches = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(
        oh * ow, c_in * kh * kw
    )
    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    y = (patches @ kmat.T).T.reshape(c_out, oh, ow)
    if bias is not None:
        y = y + bias.data[:, None, None]
    out = Tensor(y)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gmat = g.reshape(c_out, oh * ow)
        accumulate_grad(kernel, (gmat @ patches).reshape(kernel.data.shape))
        if bias is not None:
            accumulate_grad(bias, g.astype(np.float64).sum(axis=(1, 2)))
        if _needs(x):
            dpatch = (gmat.T @ kmat).reshape(oh, ow, c_in, kh, kw)
            dxp = np.zeros_like(xp, dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                        dpatch[:, :, :, i, j].transpose(2, 0, 1)
                    )
            accumulate_grad(x, dxp[:, ph_lo : ph_lo + h, pw_lo : pw_lo + w])

    return record_op(out, inputs, bw)


def flatten_to_time(x):
    """(c, T, F) -> (T, c*F), time-major rows for the transformer stack."""
    if x.data.ndim != 3:
        raise DimensionError(f"flatten_to_time expects (c,T,F), got {x.data.shape}")
    c, t, f = x.data.shape
    out = Tensor(np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, c * f))

    def bw(g):
        accumulate_grad(x, g.reshape(t, c, f).transpose(1, 0, 2))

    return record_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    out = Tensor(
        np.asarray(a.data.astype(np.float64).sum(), dtype=a.data.dtype)
    )

    def bw(g):
        accumulate_grad(a, np.full_like(a.data, 1.0) * g)

    return record_op(out, (a,), bw)


def mean_all(a):
    n = a.data.size
    out = Tensor(
        np.asarray(a.data.astype(np.float64).sum() / n, dtype=a.data.dtype)
    )

    def bw(g):
        accumulate_grad(a, np.full_like(a.data, 1.0 / n) * g)

    return record_op(out, (a,), bw)
