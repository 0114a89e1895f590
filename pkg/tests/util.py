"""Shared helpers for the test suite: reference implementations and metrics."""

import numpy as np


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-free gradient-check metric: ||a-b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def conv2d_naive(x, kernel, bias, stride=1, pad=0):
    """Sextuple-loop cross-correlation reference, deliberately slow."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(h_out):
                for xi in range(w_out):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[ni, ci, yi * stride + u, xi * stride + v]
                                    * kernel[oi, ci, u, v]
                                )
                    out[ni, oi, yi, xi] = acc + (bias[oi] if bias is not None else 0.0)
    return out
