"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is picked once at import time. Set ``HINET_NUMBA=0`` to force
the numpy path (useful for debugging, or where numba is unavailable).
Both paths are always importable as ``numpy_<name>`` / ``numba_<name>`` so
tests and the benchmark can compare them directly.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HINET_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def numpy_scatter_add_rows(n_rows, idx, src):
    """out[idx[r]] += src[r] for every r; out has ``n_rows`` rows."""
    out = np.zeros((n_rows,) + src.shape[1:], dtype=np.float64)
    np.add.at(out, idx, src)
    return out


def numpy_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def numpy_mixture_forward(w, stack):
    # w: [B, K], stack: [K, B, D] -> [B, D]
    return np.einsum("bk,kbd->bd", w, stack, optimize=False)


def numpy_mixture_backward(w, stack, g):
    dw = np.einsum("kbd,bd->bk", stack, g, optimize=False)
    dstack = w.T[:, :, None] * g[None, :, :]
    return dw, dstack


def numpy_midranks(x):
    """1-based ranks of ``x`` with tied values sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_scatter_add_2d(out, idx, src):
        n, d = src.shape
        for r in range(n):
            row = idx[r]
            for c in range(d):
                out[row, c] += src[r, c]

    def numba_scatter_add_rows(n_rows, idx, src):
        out = np.zeros((n_rows,) + src.shape[1:], dtype=np.float64)
        flat_src = np.ascontiguousarray(src, dtype=np.float64).reshape(src.shape[0], -1)
        _nb_scatter_add_2d(out.reshape(n_rows, -1), np.ascontiguousarray(idx, dtype=np.int64), flat_src)
        return out

    @njit(cache=True)
    def _nb_softmax_rows(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(k):
                out[i, j] /= s
        return out

    def numba_softmax_rows(x):
        return _nb_softmax_rows(np.ascontiguousarray(x, dtype=np.float64))

    @njit(cache=True)
    def _nb_mixture_forward(w, stack):
        k_n, b_n, d_n = stack.shape
        out = np.zeros((b_n, d_n))
        for k in range(k_n):
            for b in range(b_n):
                wk = w[b, k]
                for d in range(d_n):
                    out[b, d] += wk * stack[k, b, d]
        return out

    @njit(cache=True)
    def _nb_mixture_backward(w, stack, g):
        k_n, b_n, d_n = stack.shape
        dw = np.zeros((b_n, k_n))
        dstack = np.empty_like(stack)
        for k in range(k_n):
            for b in range(b_n):
                wk = w[b, k]
                acc = 0.0
                for d in range(d_n):
                    acc += stack[k, b, d] * g[b, d]
                    dstack[k, b, d] = wk * g[b, d]
                dw[b, k] = acc
        return dw, dstack

    def numba_mixture_forward(w, stack):
        return _nb_mixture_forward(np.ascontiguousarray(w), np.ascontiguousarray(stack))

    def numba_mixture_backward(w, stack, g):
        return _nb_mixture_backward(np.ascontiguousarray(w), np.ascontiguousarray(stack), np.ascontiguousarray(g))

    @njit(cache=True)
    def _nb_midranks(x, order):
        n = x.shape[0]
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and x[order[j + 1]] == x[order[i]]:
                j += 1
            avg = (i + j + 2) / 2.0
            for t in range(i, j + 1):
                ranks[order[t]] = avg
            i = j + 1
        return ranks

    def numba_midranks(x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _nb_midranks(x, np.argsort(x, kind="mergesort"))


if USE_NUMBA:
    scatter_add_rows = numba_scatter_add_rows
    softmax_rows = numba_softmax_rows
    mixture_forward = numba_mixture_forward
    mixture_backward = numba_mixture_backward
    midranks = numba_midranks
else:
    scatter_add_rows = numpy_scatter_add_rows
    softmax_rows = numpy_softmax_rows
    mixture_forward = numpy_mixture_forward
    mixture_backward = numpy_mixture_backward
    midranks = numpy_midranks

KERNELS = ("scatter_add_rows", "softmax_rows", "mixture_forward", "mixture_backward", "midranks")
