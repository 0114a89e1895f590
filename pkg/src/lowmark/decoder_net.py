"""The toy latent decoder: a small upsampling conv net with adapter hooks.

Maps a latent (c_z, 8, 8) to an RGB image (3, 32, 32) through a wide frozen
mid-stage at latent resolution followed by two nearest-upsample + conv
blocks. Every conv layer is a named injection point where a low-rank adapter
can be attached; the two convs that follow an upsample are the default
targets. The wide mid-stage exists so that the frozen parameter count
dwarfs the adapter budget, mirroring the parameter-efficiency regime the
lab is meant to demonstrate.

All gradients are hand-chained layer by layer; there is no autodiff graph.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import lora
from .kernels import (
    F32,
    Rng,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_backward,
    resize_bilinear,
    sigmoid,
    sigmoid_backward,
    upsample_nearest,
    upsample_nearest_backward,
)

LEAKY_SLOPE = 0.2


@dataclass
class ToyDecoderConfig:
    latent_channels: int = 4
    latent_hw: int = 8
    mid_channels: int = 128
    mid_depth: int = 2
    up_channels: int = 16
    seed: int = 2024

    @property
    def image_hw(self) -> int:
        return self.latent_hw * 4  # two fixed x2 upsample blocks


@dataclass
class ConvLayer:
    name: str
    kernel: np.ndarray  # (O, I, kh, kw)
    bias: np.ndarray  # (O,)
    stride: int = 1
    pad: int = 0
    upsample: int = 1  # nearest-upsample factor applied before the conv
    activation: str = "lrelu"  # lrelu | sigmoid

    @property
    def view(self) -> lora.WeightView:
        return lora.WeightView(self.kernel.shape)


class ToyDecoder:
    """Fixed-architecture decoder with named, adapter-ready conv layers."""

    def __init__(self, config: ToyDecoderConfig, rng: Rng | None = None, dtype=F32):
        self.config = config
        rng = rng if rng is not None else Rng(config.seed)
        c_z, mid, up = config.latent_channels, config.mid_channels, config.up_channels

        def conv(name, c_in, c_out, ksize, **kw):
            # He-style fan-in scaling keeps activations O(1) through the stack
            std = np.sqrt(2.0 / (c_in * ksize * ksize))
            return ConvLayer(
                name,
                rng.normal((c_out, c_in, ksize, ksize), std=std, dtype=dtype),
                np.zeros(c_out, dtype=dtype),
                pad=ksize // 2,
                **kw,
            )

        self.layers: list[ConvLayer] = [conv("input.conv", c_z, mid, 1)]
        for i in range(config.mid_depth):
            self.layers.append(conv(f"mid.conv.{i}", mid, mid, 3))
        self.layers.append(conv("reduce.conv", mid, up, 1))
        self.layers.append(conv("upsampler.conv.0", up, up, 3, upsample=2))
        self.layers.append(conv("upsampler.conv.1", up, up, 3, upsample=2))
        self.layers.append(conv("output.conv", up, 3, 3, activation="sigmoid"))
        self._by_name = {layer.name: layer for layer in self.layers}

    def layer(self, name: str) -> ConvLayer:
        if name not in self._by_name:
            raise KeyError(f"no injection point named {name!r}")
        return self._by_name[name]

    def param_count(self) -> int:
        return sum(l.kernel.size + l.bias.size for l in self.layers)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            out[f"{l.name}.kernel"] = l.kernel
            out[f"{l.name}.bias"] = l.bias
        return out


def list_injection_points(decoder: ToyDecoder) -> list[tuple[str, int, int]]:
    """All adapter-capable layers as (name, d, k), in forward order."""
    return [(l.name, l.view.d, l.view.k) for l in decoder.layers]


DEFAULT_INJECTION = ("upsampler.conv.0", "upsampler.conv.1")


def init_adapters(
    decoder: ToyDecoder,
    targets: list[str] | tuple[str, ...],
    rank: int,
    alpha: float,
    variant: str,
    rng: Rng,
    alpha_over_r: bool = False,
) -> dict[str, lora.LoraAdapter]:
    """Fresh adapters for the named layers; duplicate or unknown names fail."""
    if len(set(targets)) != len(targets):
        raise ValueError(f"duplicate injection targets in {list(targets)}")
    adapters = {}
    for name in targets:
        layer = decoder.layer(name)
        view = layer.view
        adapters[name] = lora.lora_init(
            view.d, view.k, rank, alpha, variant,
            view.to_matrix(layer.kernel), rng.substream(f"adapter.{name}"),
            target_id=name, alpha_over_r=alpha_over_r,
        )
    return adapters


def _effective_kernel(layer: ConvLayer, adapter: lora.LoraAdapter | None) -> np.ndarray:
    if adapter is None:
        return layer.kernel
    view = layer.view
    base_mat = view.to_matrix(layer.kernel)
    eff = lora.effective_base(base_mat, adapter) + lora.delta_weights(adapter)
    return view.to_kernel(eff.astype(layer.kernel.dtype))


@dataclass
class DecodeCache:
    decoder: ToyDecoder
    adapters: dict[str, lora.LoraAdapter] | None
    # per layer: (conv input after upsample, pre-activation, output, eff kernel)
    records: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list
    )
    image: np.ndarray | None = None


def decode_forward(
    z: np.ndarray,
    decoder: ToyDecoder,
    adapters: dict[str, lora.LoraAdapter] | None = None,
) -> tuple[np.ndarray, DecodeCache]:
    """Run the decoder, keeping per-layer caches for the backward pass."""
    cfg = decoder.config
    if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] != cfg.latent_hw:
        raise ValueError(
            f"latent shape {z.shape} does not match "
            f"(N, {cfg.latent_channels}, {cfg.latent_hw}, {cfg.latent_hw})"
        )
    if adapters:
        for name in adapters:
            decoder.layer(name)  # raises on unknown target
    cache = DecodeCache(decoder, adapters)
    x = z
    for layer in decoder.layers:
        if layer.upsample > 1:
            x = upsample_nearest(x, layer.upsample)
        adapter = adapters.get(layer.name) if adapters else None
        kernel = _effective_kernel(layer, adapter)
        pre = conv2d_forward(x, kernel, layer.bias, layer.stride, layer.pad)
        out = sigmoid(pre) if layer.activation == "sigmoid" else leaky_relu(pre, LEAKY_SLOPE)
        cache.records.append((x, pre, out, kernel))
        x = out
    cache.image = x
    return x, cache


def decode(
    z: np.ndarray,
    decoder: ToyDecoder,
    adapters: dict[str, lora.LoraAdapter] | None = None,
) -> np.ndarray:
    image, _ = decode_forward(z, decoder, adapters)
    return image


def _backward_through_layers(
    grad_image: np.ndarray, cache: DecodeCache, want_layer_grads: bool
):
    """Shared backward walk. Returns (grad_latent, layer grads, adapter grads).

    Layer gradients (kernel and bias per layer, for pretraining the clean
    decoder) are only materialized when asked; adapter factor gradients are
    produced for adapted layers via the chain rule through the delta.
    """
    if cache.image is None or grad_image.shape != cache.image.shape:
        raise ValueError("gradient shape does not match the cached forward pass")
    decoder, adapters = cache.decoder, cache.adapters
    layer_grads: dict[str, dict[str, np.ndarray]] = {}
    adapter_grads: dict[str, dict[str, np.ndarray]] = {}
    g = grad_image
    for layer, (x, pre, out, kernel) in zip(
        reversed(decoder.layers), reversed(cache.records)
    ):
        if layer.activation == "sigmoid":
            g = sigmoid_backward(g, out)
        else:
            g = leaky_relu_backward(g, pre, LEAKY_SLOPE)
        adapter = adapters.get(layer.name) if adapters else None
        g, g_kernel, g_bias = conv2d_backward(g, x, kernel, layer.stride, layer.pad)
        if want_layer_grads:
            layer_grads[layer.name] = {"kernel": g_kernel, "bias": g_bias}
        if adapter is not None:
            grad_delta = layer.view.to_matrix(g_kernel)
            adapter_grads[layer.name] = lora.adapter_grads(grad_delta, adapter)
        if layer.upsample > 1:
            g = upsample_nearest_backward(g, layer.upsample)
    return g, layer_grads, adapter_grads


def decode_backward(
    grad_image: np.ndarray, cache: DecodeCache
) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of a scalar loss wrt adapter factors only.

    Base weights are frozen: their gradients are never returned, and layers
    without adapters contribute nothing to the result.
    """
    _, _, grads = _backward_through_layers(grad_image, cache, want_layer_grads=False)
    return grads


def merge_adapters(
    decoder: ToyDecoder, adapters: dict[str, lora.LoraAdapter]
) -> ToyDecoder:
    """A standalone decoder with every delta folded into its kernels."""
    merged = copy.deepcopy(decoder)
    for name, adapter in adapters.items():
        layer = merged.layer(name)
        view = layer.view
        layer.kernel = view.to_kernel(
            lora.merge(view.to_matrix(layer.kernel), adapter).astype(layer.kernel.dtype)
        )
    return merged


def make_latents(count: int, rng: Rng, config: ToyDecoderConfig | None = None) -> np.ndarray:
    """Seeded batch of standard-normal latents."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = config if config is not None else ToyDecoderConfig()
    return rng.normal((count, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw))


@dataclass
class DecoderPretrainConfig:
    """Clean pretraining: fit the decoder to a smooth synthetic texture map."""

    decoder: ToyDecoderConfig = field(default_factory=ToyDecoderConfig)
    steps: int = 400
    batch: int = 16
    lr: float = 2e-3
    target_gain: float = 1.2
    seed: int = 7


def _texture_target(z: np.ndarray, mix: np.ndarray, gain: float) -> np.ndarray:
    """Smooth latent-dependent RGB target: mixed channels, bilinear x4, squashed."""
    up = resize_bilinear(z, z.shape[2] * 4, z.shape[3] * 4)
    mixed = np.einsum("rc,nchw->nrhw", mix, up).astype(z.dtype)
    return sigmoid(gain * mixed)


def pretrain_decoder(cfg: DecoderPretrainConfig, rng: Rng) -> ToyDecoder:
    """Briefly train the clean decoder so its outputs are non-degenerate.

    The target is a fixed smooth function of the latent, so the decoder
    learns a textured, mid-toned output distribution. Every weight trains
    here; adapters and freezing come later.
    """
    from .optim import Adam  # local import: optim depends on nothing heavy

    decoder = ToyDecoder(cfg.decoder, rng.substream("decoder-init"))
    mix = rng.substream("target-mix").normal((3, cfg.decoder.latent_channels), std=0.8)
    params = decoder.named_arrays()
    opt = Adam(params, lr=cfg.lr)
    data_rng = rng.substream("latents")
    for _ in range(cfg.steps):
        z = make_latents(cfg.batch, data_rng, cfg.decoder)
        target = _texture_target(z, mix, cfg.target_gain)
        img, cache = decode_forward(z, decoder)
        grad = (2.0 / img.size) * (img - target)
        _, layer_grads, _ = _backward_through_layers(
            grad.astype(img.dtype), cache, want_layer_grads=True
        )
        flat = {
            f"{name}.{part}": g
            for name, parts in layer_grads.items()
            for part, g in parts.items()
        }
        opt.step(flat)
    return decoder
