"""Low-rank adapter algebra: init, delta materialization, merge, gradients.

An adapter attaches to one base weight viewed as a d x k matrix (for a conv
kernel, d = out-channels and k = in-channels * kh * kw, a lossless reshape).
The trained delta is alpha * b @ a for the plain and principal-component
variants, and a Hadamard product of two such low-rank products for the
higher-capacity variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import F32, Rng, svd_truncated

LORA = "lora"
PISSA = "pissa"
LOHA = "loha"
VARIANTS = (LORA, PISSA, LOHA)


@dataclass
class LoraAdapter:
    """Trainable low-rank factors attached to one base weight.

    delta = alpha * (b @ a)                      for lora / pissa
    delta = alpha * (b @ a) * (b2 @ a2)          for loha (elementwise)

    For pissa, ``residual_base`` holds the non-principal part of the original
    weight; the effective frozen base during evaluation is the residual, not
    the original matrix.

    ``alpha_over_r`` switches the scale to alpha / rank for compatibility
    with the common adapter convention; the default applies alpha literally.
    """

    variant: str
    rank: int
    alpha: float
    a: np.ndarray  # (rank, k)
    b: np.ndarray  # (d, rank)
    a2: np.ndarray | None = None
    b2: np.ndarray | None = None
    residual_base: np.ndarray | None = None
    target_id: str = ""
    alpha_over_r: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank if self.alpha_over_r else self.alpha

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        out = {"a": self.a, "b": self.b}
        if self.variant == LOHA:
            out["a2"] = self.a2
            out["b2"] = self.b2
        return out


def lora_init(
    d: int,
    k: int,
    rank: int,
    alpha: float,
    variant: str,
    base: np.ndarray | None,
    rng: Rng,
    target_id: str = "",
    alpha_over_r: bool = False,
    dtype=F32,
) -> LoraAdapter:
    """Create a freshly initialized adapter for a d x k base weight.

    lora:  a Gaussian with std 1/sqrt(rank), b zero, so the initial delta is
           exactly zero and the adapted model starts bit-identical to clean.
    pissa: (b, a) from the top-rank singular triplets of ``base``; the
           residual keeps the remainder so residual + b @ a reconstructs the
           base. Requires alpha == 1 at init (any other scale would make the
           reconstruction ambiguous).
    loha:  like lora plus a second factor pair with Gaussian a2 and
           constant-column b2; b == 0 keeps the initial delta zero.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown adapter variant {variant!r}")
    if not 1 <= rank <= min(d, k):
        raise ValueError(f"rank {rank} out of range for a {d}x{k} weight")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")

    std = 1.0 / np.sqrt(rank)
    if variant == LORA:
        return LoraAdapter(
            variant, rank, alpha,
            a=rng.normal((rank, k), std=std, dtype=dtype),
            b=np.zeros((d, rank), dtype=dtype),
            target_id=target_id, alpha_over_r=alpha_over_r,
        )
    if variant == LOHA:
        return LoraAdapter(
            variant, rank, alpha,
            a=rng.normal((rank, k), std=std, dtype=dtype),
            b=np.zeros((d, rank), dtype=dtype),
            a2=rng.normal((rank, k), std=std, dtype=dtype),
            b2=np.full((d, rank), std, dtype=dtype),
            target_id=target_id, alpha_over_r=alpha_over_r,
        )

    # pissa
    if base is None:
        raise ValueError("pissa init requires the base weight")
    if base.shape != (d, k):
        raise ValueError(f"base shape {base.shape} does not match ({d}, {k})")
    if alpha != 1.0 or alpha_over_r:
        raise ValueError("pissa init requires alpha == 1 (literal scale)")
    u, s, v = svd_truncated(np.asarray(base, dtype=np.float64), rank)
    root = np.sqrt(s)
    b = (u * root).astype(dtype)
    a = (root[:, None] * v.T).astype(dtype)
    residual = (np.asarray(base, dtype=np.float64) - b.astype(np.float64) @ a.astype(np.float64)).astype(dtype)
    return LoraAdapter(
        variant, rank, alpha, a=a, b=b, residual_base=residual,
        target_id=target_id, alpha_over_r=alpha_over_r,
    )


def delta_weights(adapter: LoraAdapter) -> np.ndarray:
    """Materialize the d x k weight delta."""
    low = adapter.b @ adapter.a
    if adapter.variant == LOHA:
        low = low * (adapter.b2 @ adapter.a2)
    return (adapter.scale * low).astype(adapter.a.dtype)


def effective_base(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """The frozen matrix the delta sits on: the residual for pissa, else base."""
    if adapter.variant == PISSA:
        return adapter.residual_base
    return base


def merge(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Fold the delta into the base weight by simple addition."""
    eff = effective_base(base, adapter)
    if eff.shape != base.shape:
        raise ValueError(f"adapter shape {eff.shape} does not match base {base.shape}")
    return eff + delta_weights(adapter)


def unmerge(merged: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Subtract the same delta back out, recovering the effective base."""
    if merged.shape != adapter.shape:
        raise ValueError(
            f"merged shape {merged.shape} does not match adapter {adapter.shape}"
        )
    return merged - delta_weights(adapter)


def adapter_grads(grad_delta: np.ndarray, adapter: LoraAdapter) -> dict[str, np.ndarray]:
    """Chain-rule gradients of a loss through the materialized delta.

    grad wrt b is scale * G @ a.T and grad wrt a is scale * b.T @ G; the
    Hadamard variant masks G with the opposite factor pair first.
    """
    if grad_delta.shape != adapter.shape:
        raise ValueError(
            f"grad shape {grad_delta.shape} does not match adapter {adapter.shape}"
        )
    s = adapter.scale
    if adapter.variant == LOHA:
        ba = adapter.b @ adapter.a
        b2a2 = adapter.b2 @ adapter.a2
        g1 = grad_delta * b2a2
        g2 = grad_delta * ba
        return {
            "b": s * (g1 @ adapter.a.T),
            "a": s * (adapter.b.T @ g1),
            "b2": s * (g2 @ adapter.a2.T),
            "a2": s * (adapter.b2.T @ g2),
        }
    return {
        "b": s * (grad_delta @ adapter.a.T),
        "a": s * (adapter.b.T @ grad_delta),
    }


def param_count(adapter: LoraAdapter) -> int:
    """Number of trainable scalars: r(d+k), doubled for the Hadamard variant."""
    d, k = adapter.shape
    n = adapter.rank * (d + k)
    return 2 * n if adapter.variant == LOHA else n


@dataclass
class WeightView:
    """Lossless d x k matrix view of a conv kernel (O, I, kh, kw)."""

    kernel_shape: tuple[int, ...]

    @property
    def d(self) -> int:
        return self.kernel_shape[0]

    @property
    def k(self) -> int:
        return int(np.prod(self.kernel_shape[1:]))

    def to_matrix(self, kernel: np.ndarray) -> np.ndarray:
        if kernel.shape != self.kernel_shape:
            raise ValueError(f"kernel shape {kernel.shape} != view {self.kernel_shape}")
        return kernel.reshape(self.d, self.k)

    def to_kernel(self, matrix: np.ndarray) -> np.ndarray:
        if matrix.shape != (self.d, self.k):
            raise ValueError(f"matrix shape {matrix.shape} != ({self.d}, {self.k})")
        return matrix.reshape(self.kernel_shape)
