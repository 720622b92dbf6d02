"""Numeric kernels: numba-compiled hot loops with a pure-numpy fallback.

Backend selection (read once at import):

    REGIONFUSE_BACKEND=numba    force numba, fail loudly if unavailable
    REGIONFUSE_BACKEND=numpy    force the pure-numpy path
    unset or "auto"             numba when importable, numpy otherwise

Both paths compute the same quantities. Floating-point results can differ
between backends at the last few ulps because summation order differs;
within one backend every call is deterministic (no parallel reductions,
no fastmath).

``benchmarks/bench_backends.py`` times the two paths against each other.
"""

import math
import os

import numpy as np

ENV_VAR = "REGIONFUSE_BACKEND"


def _pick_backend() -> str:
    choice = os.environ.get(ENV_VAR, "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{ENV_VAR} must be 'numba', 'numpy' or 'auto', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _pick_backend()


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def softmax_attention_numpy(q, k, v):
    """Scaled dot-product attention.

    q: (n, d) queries, k: (m, d) keys, v: (m, c) values.
    Returns (out, weights): out (n, c), weights (n, m) with rows summing to 1.
    Scores are max-shifted before exponentiation so large query magnitudes
    cannot overflow.
    """
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    scores = (q @ k.T) / math.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v, weights


def bilinear_resize_numpy(src, out_h, out_w):
    """Bilinear resample of a 2-D map, half-pixel centers, clamped edges.

    With this convention a 2x2 -> 1x1 resize is the exact mean of the four
    source cells, and identity-size calls reproduce the input values.
    """
    src = _as_f64(src)
    h, w = src.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = ys - y0f
    wx = xs - x0f
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    return top * (1.0 - wy)[:, None] + bot * wy[:, None]


def block_mean_numpy(src, factor):
    """Mean over non-overlapping factor x factor blocks of a 2-D map."""
    src = _as_f64(src)
    h, w = src.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} map not divisible by block factor {factor}")
    return src.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _attention_kernel(q, k, v):  # pragma: no cover - exercised via wrapper
        n, d = q.shape
        m = k.shape[0]
        c = v.shape[1]
        out = np.empty((n, c), dtype=np.float64)
        weights = np.empty((n, m), dtype=np.float64)
        inv_sqrt_d = 1.0 / math.sqrt(d)
        for i in range(n):
            hi = -np.inf
            for j in range(m):
                s = 0.0
                for a in range(d):
                    s += q[i, a] * k[j, a]
                s *= inv_sqrt_d
                weights[i, j] = s
                if s > hi:
                    hi = s
            total = 0.0
            for j in range(m):
                e = math.exp(weights[i, j] - hi)
                weights[i, j] = e
                total += e
            for j in range(m):
                weights[i, j] /= total
            for b in range(c):
                out[i, b] = 0.0
            for j in range(m):  # row-major accumulation over values
                w_ij = weights[i, j]
                for b in range(c):
                    out[i, b] += w_ij * v[j, b]
        return out, weights

    @njit(cache=True)
    def _bilinear_kernel(src, out_h, out_w):  # pragma: no cover
        h, w = src.shape
        out = np.empty((out_h, out_w), dtype=np.float64)
        sy = h / out_h
        sx = w / out_w
        for i in range(out_h):
            fy = (i + 0.5) * sy - 0.5
            y0f = math.floor(fy)
            wy = fy - y0f
            y0 = int(min(max(y0f, 0), h - 1))
            y1 = int(min(max(y0f + 1, 0), h - 1))
            for j in range(out_w):
                fx = (j + 0.5) * sx - 0.5
                x0f = math.floor(fx)
                wx = fx - x0f
                x0 = int(min(max(x0f, 0), w - 1))
                x1 = int(min(max(x0f + 1, 0), w - 1))
                top = src[y0, x0] * (1.0 - wx) + src[y0, x1] * wx
                bot = src[y1, x0] * (1.0 - wx) + src[y1, x1] * wx
                out[i, j] = top * (1.0 - wy) + bot * wy
        return out

    @njit(cache=True)
    def _block_mean_kernel(src, factor):  # pragma: no cover
        h, w = src.shape
        oh = h // factor
        ow = w // factor
        out = np.empty((oh, ow), dtype=np.float64)
        norm = 1.0 / (factor * factor)
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for a in range(factor):
                    for b in range(factor):
                        acc += src[i * factor + a, j * factor + b]
                out[i, j] = acc * norm
        return out

    def softmax_attention_numba(q, k, v):
        return _attention_kernel(_as_f64(q), _as_f64(k), _as_f64(v))

    def bilinear_resize_numba(src, out_h, out_w):
        return _bilinear_kernel(_as_f64(src), out_h, out_w)

    def block_mean_numba(src, factor):
        src = _as_f64(src)
        h, w = src.shape
        if h % factor or w % factor:
            raise ValueError(f"{h}x{w} map not divisible by block factor {factor}")
        return _block_mean_kernel(src, factor)

    softmax_attention = softmax_attention_numba
    bilinear_resize = bilinear_resize_numba
    block_mean = block_mean_numba
else:
    softmax_attention_numba = None
    bilinear_resize_numba = None
    block_mean_numba = None

    softmax_attention = softmax_attention_numpy
    bilinear_resize = bilinear_resize_numpy
    block_mean = block_mean_numpy


def implementations():
    """Kernel maps per backend, for benchmarks and cross-checks."""
    impls = {
        "numpy": {
            "softmax_attention": softmax_attention_numpy,
            "bilinear_resize": bilinear_resize_numpy,
            "block_mean": block_mean_numpy,
        }
    }
    if BACKEND == "numba":
        impls["numba"] = {
            "softmax_attention": softmax_attention_numba,
            "bilinear_resize": bilinear_resize_numba,
            "block_mean": block_mean_numba,
        }
    return impls


def warm_up():
    """Trigger numba compilation so first-use latency stays out of hot paths."""
    q = np.zeros((2, 3))
    k = np.ones((2, 3))
    v = np.ones((2, 2))
    softmax_attention(q, k, v)
    bilinear_resize(np.zeros((2, 2)), 4, 4)
    block_mean(np.zeros((4, 4)), 2)
