"""Deterministic numerical kernels.

Everything downstream (the toy decoder, the watermark extractor, the attack
suite) is built from the primitives in this module: NCHW convolution with
hand-derived backward passes, nearest/bilinear resampling, a small dense SVD,
PSNR, and a central-difference gradient estimator used as the test oracle.

Conventions
-----------
- Tensors are plain ``numpy.ndarray`` objects. Weights and activations are
  float32, C-order; reductions (MSE, loss sums) accumulate in float64.
- All functions are pure: no global state, no hidden RNG. Randomness flows
  through :class:`Rng` instances passed in explicitly.
- Convolution is cross-correlation with explicit zero padding. No FFT or
  Winograd paths; correctness over speed at this scale.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

F32 = np.float32

# PSNR returned for a zero-MSE pair; finite so controller arithmetic stays finite.
PSNR_CAP_DB = 99.0


class Rng:
    """Seeded random source with named, independently re-seedable substreams.

    Wraps numpy's PCG64 generator. Identical seeds produce identical streams
    on every platform. Substreams are derived from the parent seed plus a
    CRC32 of the label, so components (latents, noise layer, attacks) can be
    re-seeded independently of call order.
    """

    ALGORITHM = "pcg64"

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def substream(self, label: str) -> "Rng":
        """Derive an independent child stream identified by ``label``."""
        tag = zlib.crc32(label.encode("utf-8"))
        return Rng(self.seed, self._spawn_key + (tag,))

    def normal(self, shape, std: float = 1.0, dtype=F32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_nchw(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be NCHW, got shape {x.shape}")


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Cross-correlate ``x`` (N,C,H,W) with ``kernel`` (O,C,kh,kw).

    Zero padding of ``pad`` on both spatial sides, identical stride in both
    directions. Internally lowers to an im2col matrix product; the naive
    sextuple loop lives in the test suite as the oracle.
    """
    _check_nchw(x, "input")
    _check_nchw(kernel, "kernel")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"kernel {kh}x{kw} with stride {stride}, pad {pad} does not fit "
            f"input {h}x{w}"
        )

    cols = _im2col(x, kh, kw, stride, pad, h_out, w_out)
    kmat = kernel.reshape(o, c * kh * kw)
    out = cols @ kmat.T  # (N*h_out*w_out, O)
    if bias is not None:
        out += bias
    return np.ascontiguousarray(
        out.reshape(n, h_out, w_out, o).transpose(0, 3, 1, 2)
    )


def _im2col(x, kh, kw, stride, pad, h_out, w_out):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, h_out, w_out, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (N, h_out, w_out, C, kh, kw) -> rows of length C*kh*kw
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c * kh * kw
    )


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of :func:`conv2d_forward`.

    ``x`` is the input cached from the forward call. Returns
    ``(grad_input, grad_kernel, grad_bias)``.
    """
    _check_nchw(grad_out, "grad_out")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if grad_out.shape != (n, o, h_out, w_out):
        raise ValueError(
            f"grad_out shape {grad_out.shape} inconsistent with forward output "
            f"({n}, {o}, {h_out}, {w_out})"
        )

    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(
        n * h_out * w_out, o
    )
    cols = _im2col(x, kh, kw, stride, pad, h_out, w_out)
    grad_kernel = (gmat.T @ cols).reshape(kernel.shape)
    grad_bias = gmat.sum(axis=0, dtype=np.float64).astype(x.dtype)

    gcols = (gmat @ kernel.reshape(o, c * kh * kw)).reshape(
        n, h_out, w_out, c, kh, kw
    )
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            gpad[
                :, :, u : u + h_out * stride : stride, v : v + w_out * stride : stride
            ] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    grad_input = gpad[:, :, pad : pad + h, pad : pad + w] if pad else gpad
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every pixel into a ``factor`` x ``factor`` block."""
    _check_nchw(x, "input")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Sum gradients over each replication block."""
    _check_nchw(grad_out, "grad_out")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return grad_out
    n, c, h, w = grad_out.shape
    if h % factor or w % factor:
        raise ValueError(f"grad shape {grad_out.shape} not divisible by {factor}")
    blocks = grad_out.reshape(n, c, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(3, 5), dtype=np.float64).astype(grad_out.dtype)


def linear_resample_matrix(
    n_src: int, n_out: int, lo: float = 0.0, hi: float | None = None
) -> np.ndarray:
    """Row-stochastic (n_out, n_src) bilinear sampling matrix.

    Maps output index i to source coordinate lo + (i + 0.5) * span / n_out
    - 0.5 (half-pixel centers, the usual align_corners=False convention) and
    splits each sample between its two neighbours. Used for bilinear resize
    and crop-and-resize; its transpose is the exact backward map.
    """
    if hi is None:
        hi = float(n_src)
    span = hi - lo
    mat = np.zeros((n_out, n_src), dtype=np.float64)
    for i in range(n_out):
        src = lo + (i + 0.5) * span / n_out - 0.5
        src = min(max(src, 0.0), n_src - 1.0)
        j0 = int(np.floor(src))
        j1 = min(j0 + 1, n_src - 1)
        frac = src - j0
        mat[i, j0] += 1.0 - frac
        mat[i, j1] += frac
    return mat.astype(F32)


def resize_bilinear(
    x: np.ndarray, out_h: int, out_w: int, box: tuple[float, float, float, float] | None = None
) -> np.ndarray:
    """Bilinear resample of NCHW ``x`` to (out_h, out_w).

    ``box`` optionally restricts sampling to the sub-rectangle
    (top, bottom, left, right) in source pixel units, i.e. crop-and-resize.
    """
    _check_nchw(x, "input")
    h, w = x.shape[2], x.shape[3]
    if box is None:
        rh = linear_resample_matrix(h, out_h)
        rw = linear_resample_matrix(w, out_w)
    else:
        top, bottom, left, right = box
        rh = linear_resample_matrix(h, out_h, top, bottom)
        rw = linear_resample_matrix(w, out_w, left, right)
    return np.matmul(np.matmul(rh, x), rw.T)


def resize_bilinear_backward(
    grad_out: np.ndarray, in_h: int, in_w: int, box=None
) -> np.ndarray:
    """Transpose of :func:`resize_bilinear` with the same geometry."""
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    if box is None:
        rh = linear_resample_matrix(in_h, out_h)
        rw = linear_resample_matrix(in_w, out_w)
    else:
        top, bottom, left, right = box
        rh = linear_resample_matrix(in_h, out_h, top, bottom)
        rw = linear_resample_matrix(in_w, out_w, left, right)
    return np.matmul(np.matmul(rh.T, grad_out), rw)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x >= 0, x, (slope * x).astype(x.dtype))


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = 0.2):
    return np.where(x >= 0, grad_out, (slope * grad_out).astype(grad_out.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward given the forward *output* ``y``."""
    return grad_out * y * (1.0 - y)


def svd_truncated(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rank-r truncated SVD of a dense matrix via one-sided Jacobi.

    Returns ``(u, s, v)`` with ``u`` (d, r) and ``v`` (k, r) having
    orthonormal columns and ``s`` the top r singular values in descending
    order, so ``u @ diag(s) @ v.T`` is the best rank-r approximation.

    One-sided Jacobi rotations are applied on the smaller dimension of the
    Gram problem; matrices here are a few hundred per side at most, where
    this is both robust and fast enough. Computation is float64 throughout.
    """
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    d, k = m.shape
    if not 1 <= r <= min(d, k):
        raise ValueError(f"rank {r} out of range for a {d}x{k} matrix")

    if d >= k:
        u, s, v = _jacobi_svd(np.asarray(m, dtype=np.float64))
    else:
        v, s, u = _jacobi_svd(np.asarray(m.T, dtype=np.float64))
    return u[:, :r], s[:r], v[:, :r]


def _jacobi_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi SVD of ``a`` (d >= k columns)."""
    d, k = a.shape
    w = a.copy()
    v = np.eye(k)
    eps = np.finfo(np.float64).eps
    for _ in range(60):  # sweeps; small matrices converge in < 15
        off = 0.0
        for i in range(k - 1):
            for j in range(i + 1, k):
                aii = w[:, i] @ w[:, i]
                ajj = w[:, j] @ w[:, j]
                aij = w[:, i] @ w[:, j]
                if aii * ajj == 0.0 or abs(aij) <= eps * np.sqrt(aii * ajj):
                    continue
                off = max(off, abs(aij) / np.sqrt(aii * ajj))
                theta = 0.5 * np.arctan2(2.0 * aij, aii - ajj)
                c, s = np.cos(theta), np.sin(theta)
                wi = w[:, i].copy()
                w[:, i] = c * wi + s * w[:, j]
                w[:, j] = -s * wi + c * w[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi + s * v[:, j]
                v[:, j] = -s * vi + c * v[:, j]
        if off < 1e-14:
            break

    sv = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros_like(w)
    nonzero = sv > 0
    u[:, nonzero] = w[:, nonzero] / sv[nonzero]
    return u, sv, v


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB between two same-shape tensors.

    Images live in [0, 1] so the peak defaults to 1.0. A zero-MSE pair
    returns :data:`PSNR_CAP_DB` rather than infinity.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per entry.

    Test oracle only; cost is two function evaluations per coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
