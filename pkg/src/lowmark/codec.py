"""Watermark payload, extractor network, losses, and stage-0 pretraining.

The extractor is a small strided conv net ending in global average pooling
and an affine head producing one logit per payload bit. It is trained once,
jointly with a throwaway residual encoder, on random textured images and
random payloads passed through a differentiable noise layer; afterwards the
head is re-centered on unmarked images (so null bits are balanced), the
weights are frozen, and the encoder is discarded. Watermark embedding then
trains the generator side against this fixed extractor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    F32,
    Rng,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_backward,
    resize_bilinear,
    resize_bilinear_backward,
    sigmoid,
    upsample_nearest,
    upsample_nearest_backward,
)

SOFT_EPS = 1e-7
LEAKY_SLOPE = 0.2


class ConvergenceError(RuntimeError):
    """Stage-0 pretraining failed to reach usable accuracy."""


@dataclass(frozen=True)
class WatermarkMessage:
    """An n-bit payload. Bit 0 is the most significant hex digit's top bit."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) < 1 or any(b not in (0, 1) for b in self.bits):
            raise ValueError("payload must be a non-empty sequence of 0/1 bits")

    @property
    def n(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)

    @classmethod
    def random(cls, n: int, rng: Rng) -> "WatermarkMessage":
        return cls(tuple(int(b) for b in rng.integers(0, 2, (n,))))

    @classmethod
    def from_hex(cls, text: str, n: int) -> "WatermarkMessage":
        value = int(text, 16)
        if value >= (1 << n):
            raise ValueError(f"hex payload {text!r} does not fit in {n} bits")
        return cls(tuple((value >> (n - 1 - i)) & 1 for i in range(n)))

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return f"{value:0{(self.n + 3) // 4}x}"


class WatermarkDecoder:
    """Frozen-after-pretraining extractor: 3 strided convs, GAP, affine head."""

    def __init__(self, n: int, image_hw: int = 32, rng: Rng | None = None,
                 widths: tuple[int, int, int] = (10, 20, 40), dtype=F32):
        if n < 1:
            raise ValueError("payload length must be >= 1")
        self.n = n
        self.image_hw = image_hw
        self.widths = widths
        rng = rng if rng is not None else Rng(0)
        c_prev = 3
        self.kernels, self.biases = [], []
        for w in widths:
            std = np.sqrt(2.0 / (c_prev * 9))
            self.kernels.append(rng.normal((w, c_prev, 3, 3), std=std, dtype=dtype))
            self.biases.append(np.zeros(w, dtype=dtype))
            c_prev = w
        self.head_w = rng.normal((n, c_prev), std=1.0 / np.sqrt(c_prev), dtype=dtype)
        self.head_b = np.zeros(n, dtype=dtype)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        for arr in self.named_arrays().values():
            arr.setflags(write=False)
        self._frozen = True

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"conv.{i}.kernel"] = k
            out[f"conv.{i}.bias"] = b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def forward(self, images: np.ndarray):
        """Logits (N, n) plus the cache needed for backward."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
        if images.shape[2] != self.image_hw or images.shape[3] != self.image_hw:
            raise ValueError(
                f"image size {images.shape[2:]}, extractor expects "
                f"({self.image_hw}, {self.image_hw})"
            )
        x = images
        records = []
        for k, b in zip(self.kernels, self.biases):
            pre = conv2d_forward(x, k, b, stride=2, pad=1)
            out = leaky_relu(pre, LEAKY_SLOPE)
            records.append((x, pre))
            x = out
        feat = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)  # GAP
        logits = feat @ self.head_w.T + self.head_b
        return logits, (records, x, feat)

    def backward(self, grad_logits: np.ndarray, cache, want_params: bool = False):
        """Gradient wrt the input images (and optionally all weights)."""
        records, last, feat = cache
        grads = {}
        if want_params:
            if self._frozen:
                raise ValueError("extractor is frozen; parameter grads refused")
            grads["head.w"] = grad_logits.T @ feat
            grads["head.b"] = grad_logits.sum(axis=0)
        g_feat = grad_logits @ self.head_w
        hw = last.shape[2] * last.shape[3]
        g = np.broadcast_to(
            (g_feat / hw)[:, :, None, None], last.shape
        ).astype(last.dtype)
        for i in reversed(range(len(self.kernels))):
            x, pre = records[i]
            g = leaky_relu_backward(g, pre, LEAKY_SLOPE)
            g, gk, gb = conv2d_backward(g, x, self.kernels[i], stride=2, pad=1)
            if want_params:
                grads[f"conv.{i}.kernel"] = gk
                grads[f"conv.{i}.bias"] = gb
        return g, grads


def extract(images: np.ndarray, dec) -> np.ndarray:
    """Soft bits in (0, 1), shape (N, n). Hard bits are soft > 0.5."""
    single = images.ndim == 3
    if single:
        images = images[None]
    logits, _ = dec.forward(images)
    soft = np.clip(sigmoid(logits.astype(np.float64)), SOFT_EPS, 1.0 - SOFT_EPS)
    return soft[0] if single else soft


def hard_bits(soft: np.ndarray) -> np.ndarray:
    return (np.asarray(soft) > 0.5).astype(np.uint8)


def bce_loss(soft: np.ndarray, message: WatermarkMessage):
    """Mean binary cross entropy and its gradient wrt the soft bits."""
    soft = np.atleast_2d(np.asarray(soft, dtype=np.float64))
    if soft.shape[-1] != message.n:
        raise ValueError(f"got {soft.shape[-1]} soft bits for an {message.n}-bit payload")
    w = message.as_array()
    count = soft.size
    loss = -np.sum(w * np.log(soft) + (1.0 - w) * np.log(1.0 - soft)) / count
    grad = (-(w / soft) + (1.0 - w) / (1.0 - soft)) / count
    return float(loss), grad


def bit_accuracy(soft: np.ndarray, message: WatermarkMessage) -> float:
    """Fraction of hard bits matching the payload, averaged over the batch."""
    soft = np.atleast_2d(np.asarray(soft))
    if soft.shape[-1] != message.n:
        raise ValueError(f"got {soft.shape[-1]} soft bits for an {message.n}-bit payload")
    return float(np.mean(hard_bits(soft) == np.asarray(message.bits, dtype=np.uint8)))


def matched_bits(soft: np.ndarray, message: WatermarkMessage) -> np.ndarray:
    """Per-image count of hard bits equal to the payload, shape (N,)."""
    soft = np.atleast_2d(np.asarray(soft))
    return (hard_bits(soft) == np.asarray(message.bits, dtype=np.uint8)).sum(axis=1)


class FixedProjectionExtractor:
    """Debug extractor: a seeded, row-centered affine map plus sigmoid.

    No pretraining; bits on random images are balanced by construction
    (each projection row sums to zero). Useful for fast unit tests of the
    training loop and of the null model used by verification.
    """

    def __init__(self, n: int, image_hw: int, rng: Rng, gain: float = 4.0):
        self.n = n
        self.image_hw = image_hw
        dim = 3 * image_hw * image_hw
        proj = rng.normal((n, dim), std=1.0, dtype=np.float64)
        proj -= proj.mean(axis=1, keepdims=True)
        self.proj = (proj * gain / np.sqrt(dim)).astype(F32)
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return True

    def forward(self, images: np.ndarray):
        if images.shape[2] != self.image_hw or images.shape[3] != self.image_hw:
            raise ValueError(f"image size {images.shape[2:]} unsupported")
        flat = images.reshape(images.shape[0], -1)
        return flat @ self.proj.T, images.shape

    def backward(self, grad_logits: np.ndarray, cache, want_params: bool = False):
        if want_params:
            raise ValueError("debug extractor has no trainable parameters")
        return (grad_logits @ self.proj).reshape(cache), {}

    def weights_hash(self) -> str:
        return hashlib.sha256(self.proj.tobytes()).hexdigest()


def random_textures(count: int, hw: int, rng: Rng) -> np.ndarray:
    """Smooth random images in [0, 1] with varied brightness and contrast."""
    low = rng.normal((count, 3, hw // 4, hw // 4))
    base = resize_bilinear(low, hw, hw)
    contrast = rng.uniform(0.1, 0.3, (count, 1, 1, 1)).astype(F32)
    offset = rng.uniform(0.3, 0.7, (count, 1, 1, 1)).astype(F32)
    grain = rng.normal((count, 3, hw, hw), std=0.02)
    return np.clip(base * contrast + offset + grain, 0.0, 1.0).astype(F32)


def _noise_layer(x: np.ndarray, rng: Rng):
    """One randomly chosen differentiable corruption; returns (y, backward)."""
    kind = int(rng.integers(0, 4))
    if kind == 0:  # identity
        return x, lambda g: g
    if kind == 1:  # additive gaussian, sigma <= 0.05
        sigma = float(rng.uniform(0.01, 0.05))
        return x + rng.normal(x.shape, std=sigma), lambda g: g
    if kind == 2:  # random crop covering >= 0.7 area, resized back
        h, w = x.shape[2], x.shape[3]
        side = float(np.sqrt(rng.uniform(0.7, 1.0)))
        ch, cw = side * h, side * w
        top = float(rng.uniform(0, h - ch))
        left = float(rng.uniform(0, w - cw))
        box = (top, top + ch, left, left + cw)
        y = resize_bilinear(x, h, w, box=box)
        return y, lambda g: resize_bilinear_backward(g, h, w, box=box)
    # brightness shift within +/- 0.2
    delta = float(rng.uniform(-0.2, 0.2))
    return x + np.float32(delta), lambda g: g


@dataclass
class PretrainCodecConfig:
    n: int = 16
    image_hw: int = 32
    steps: int = 4500
    batch: int = 16
    lr: float = 2e-3
    pattern_rms: float = 0.04  # residual amplitude held fixed during training
    pattern_grid: int = 8  # patterns live at this resolution, upsampled to hw
    val_images: int = 256
    calib_images: int = 512
    min_clean_accuracy: float = 0.9
    seed: int = 11


@dataclass
class CodecReport:
    clean_accuracy: float
    noisy_accuracy: float
    steps: int
    n: int


class _ResidualEncoder:
    """Throwaway pretraining companion: one low-resolution pattern per bit.

    Patterns are stored on a coarse grid and bilinearly upsampled to image
    size, keeping the marks band-limited so they survive crop-and-resize
    misalignment.
    """

    def __init__(self, cfg: PretrainCodecConfig, rng: Rng):
        self.cfg = cfg
        self.patterns = rng.normal((cfg.n, 3, cfg.pattern_grid, cfg.pattern_grid))
        self._renormalize()

    def _field(self) -> np.ndarray:
        return resize_bilinear(self.patterns, self.cfg.image_hw, self.cfg.image_hw)

    def _renormalize(self):
        # hold the full-resolution mark at fixed RMS amplitude
        field_ = self._field().astype(np.float64)
        rms = np.sqrt(np.mean(field_**2, axis=(1, 2, 3)))
        self.patterns *= (self.cfg.pattern_rms / np.maximum(rms, 1e-12))[
            :, None, None, None
        ].astype(F32)

    def embed(self, images: np.ndarray, signs: np.ndarray) -> np.ndarray:
        return images + np.einsum("bn,nchw->bchw", signs, self._field()).astype(F32)

    def grad(self, grad_marked: np.ndarray, signs: np.ndarray) -> np.ndarray:
        g = np.einsum("bchw,bn->nchw", grad_marked, signs).astype(F32)
        return resize_bilinear_backward(g, self.cfg.pattern_grid, self.cfg.pattern_grid)


def pretrain_codec(
    cfg: PretrainCodecConfig, rng: Rng
) -> tuple[WatermarkDecoder, CodecReport]:
    """Stage 0: train encoder + extractor through the noise layer, freeze.

    The companion encoder adds one fixed-RMS pattern per bit; training under
    identity / gaussian / crop-resize / brightness corruption makes the
    extractor read small low-frequency marks robustly. After training the
    head bias is re-centered on unmarked images (per-bit median logit goes
    to zero) so random inputs decode to coin-flip bits, then everything is
    frozen and the encoder is dropped.

    Raises :class:`ConvergenceError` if clean validation accuracy ends below
    ``cfg.min_clean_accuracy``.
    """
    from .optim import Adam

    dec = WatermarkDecoder(cfg.n, cfg.image_hw, rng.substream("codec-init"))
    enc = _ResidualEncoder(cfg, rng.substream("encoder-init"))
    params = dict(dec.named_arrays())
    params["patterns"] = enc.patterns
    opt = Adam(params, lr=cfg.lr)
    data_rng = rng.substream("images")
    bit_rng = rng.substream("payloads")
    noise_rng = rng.substream("noise-layer")

    for _ in range(cfg.steps):
        images = random_textures(cfg.batch, cfg.image_hw, data_rng)
        bits = bit_rng.integers(0, 2, (cfg.batch, cfg.n)).astype(np.float64)
        signs = (2.0 * bits - 1.0).astype(F32)
        marked = enc.embed(images, signs)
        noised, noise_back = _noise_layer(marked, noise_rng)
        logits, cache = dec.forward(noised)
        soft = np.clip(sigmoid(logits.astype(np.float64)), SOFT_EPS, 1.0 - SOFT_EPS)
        grad_logits = ((soft - bits) / soft.size).astype(F32)
        grad_images, grads = dec.backward(grad_logits, cache, want_params=True)
        grads["patterns"] = enc.grad(noise_back(grad_images), signs)
        opt.step(grads)
        enc._renormalize()

    # balance the null: per-bit median logit on unmarked images -> 0
    calib = random_textures(cfg.calib_images, cfg.image_hw, rng.substream("calibration"))
    logits, _ = dec.forward(calib)
    dec.head_b -= np.median(logits, axis=0).astype(dec.head_b.dtype)

    val_rng = rng.substream("validation")
    val_images = random_textures(cfg.val_images, cfg.image_hw, val_rng)
    val_bits = rng.substream("val-payloads").integers(0, 2, (cfg.val_images, cfg.n))
    val_signs = (2.0 * val_bits - 1.0).astype(F32)
    val_marked = enc.embed(val_images, val_signs)

    def accuracy(imgs):
        logits, _ = dec.forward(imgs)
        return float(np.mean((logits > 0) == (val_bits > 0)))

    clean_acc = accuracy(val_marked)
    noised = [
        _noise_layer(val_marked, rng.substream(f"val-noise.{i}"))[0] for i in range(4)
    ]
    noisy_acc = float(np.mean([accuracy(np.clip(v, 0, 1)) for v in noised]))

    if clean_acc < cfg.min_clean_accuracy:
        raise ConvergenceError(
            f"clean validation accuracy {clean_acc:.3f} below "
            f"{cfg.min_clean_accuracy} after {cfg.steps} steps"
        )
    dec.freeze()
    return dec, CodecReport(clean_acc, noisy_acc, cfg.steps, cfg.n)
