"""Watermark-embedding training: optimize adapter factors only.

Each step decodes a latent batch twice, clean (frozen weights, no adapters)
and adapted, then minimizes

    total = image_weight * MSE(adapted, clean)
          + watermark_weight * BCE(extract(adapted), payload)

with gradients flowing exclusively into the adapter factors. The two loss
weights are managed by the dynamic controller, evaluated on a fixed held-out
latent batch every ``eval_every`` steps. The image loss anchors the marked
output to the clean output in pixel space, which makes PSNR the natural
quality readout.

Wall-clock values (including the time-to-99%-accuracy summary) never enter
the canonical trace CSV; they live in a timing sidecar so identical seeds
produce byte-identical trace files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import SOFT_EPS, WatermarkMessage, bit_accuracy
from .decoder_net import (
    DEFAULT_INJECTION,
    ToyDecoder,
    decode_backward,
    decode_forward,
    init_adapters,
    make_latents,
)
from .dlwt import DlwtConfig, DlwtState, dlwt_step
from .kernels import F32, Rng, psnr, sigmoid
from .lora import param_count
from .optim import make_optimizer


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dlwt: DlwtConfig = field(default_factory=DlwtConfig)
    eval_every: int = 10
    eval_batch: int = 64
    seed: int = 1
    injection: tuple[str, ...] = DEFAULT_INJECTION
    rank: int = 8
    alpha: float = 8.0
    variant: str = "lora"
    alpha_over_r: bool = False
    message: WatermarkMessage = field(
        default_factory=lambda: WatermarkMessage.from_hex("a5c3", 16)
    )
    acc_target_for_at: float = 0.99
    early_stop_patience: int = 5
    latent_pool: int = 256  # training latents; clean decodes precomputed once
    fixed_weights: tuple[float, float] | None = None  # bypass the controller

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TraceRow:
    step: int
    psnr: float
    acc: float
    image_weight: float
    watermark_weight: float
    loss_image: float
    loss_watermark: float
    loss_total: float
    branch: int  # 0 when the controller is bypassed
    wall_time: float  # seconds since run start; sidecar only


CSV_COLUMNS = (
    "step", "psnr", "acc", "image_weight", "watermark_weight",
    "loss_image", "loss_watermark", "loss_total", "branch",
)


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)
    final_acc: float = 0.0
    final_psnr: float = 0.0
    at99_step: int | None = None
    at99_seconds: float | None = None
    steps_run: int = 0
    early_stopped: bool = False
    trainable_params: int = 0
    decoder_params: int = 0
    diverged: bool = False

    def to_csv(self, path: str | Path) -> None:
        """Deterministic trace table; wall-clock stays out on purpose."""
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    [str(r.step)]
                    + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:-1]]
                    + [str(r.branch)]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "final_acc": self.final_acc,
            "final_psnr": self.final_psnr,
            "at99_step": self.at99_step,
            "steps_run": self.steps_run,
            "early_stopped": self.early_stopped,
            "trainable_params": self.trainable_params,
            "decoder_params": self.decoder_params,
            "trainable_fraction": self.trainable_params / max(self.decoder_params, 1),
            "diverged": self.diverged,
        }

    def timing(self) -> dict:
        return {
            "at99_seconds": self.at99_seconds,
            "total_seconds": self.rows[-1].wall_time if self.rows else 0.0,
            "wall_times": {str(r.step): r.wall_time for r in self.rows},
        }

    def write(self, out_dir: str | Path, stem: str = "trace") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / f"{stem}.csv")
        (out / f"{stem}_summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        )
        (out / f"{stem}_timing.json").write_text(
            json.dumps(self.timing(), indent=2, sort_keys=True) + "\n"
        )


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the partial trace for post-mortem."""

    def __init__(self, message: str, trace: TrainTrace):
        super().__init__(message)
        self.trace = trace


def _decode_in_batches(latents, decoder, adapters=None, batch=32):
    outs = []
    for i in range(0, latents.shape[0], batch):
        img, _ = decode_forward(latents[i : i + batch], decoder, adapters)
        outs.append(img)
    return np.concatenate(outs, axis=0)


def evaluate(
    decoder: ToyDecoder,
    adapters,
    codec,
    latents: np.ndarray,
    message: WatermarkMessage,
    clean_images: np.ndarray | None = None,
) -> tuple[float, float]:
    """Mean per-image PSNR (marked vs clean) and mean bit accuracy."""
    if clean_images is None:
        clean_images = _decode_in_batches(latents, decoder)
    marked = _decode_in_batches(latents, decoder, adapters)
    psnrs = [psnr(marked[i], clean_images[i]) for i in range(marked.shape[0])]
    logits, _ = codec.forward(marked)
    soft = np.clip(sigmoid(logits.astype(np.float64)), SOFT_EPS, 1.0 - SOFT_EPS)
    return float(np.mean(psnrs)), bit_accuracy(soft, message)


def _eval_losses(marked, clean, soft, bits):
    diff = marked.astype(np.float64) - clean.astype(np.float64)
    loss_i = float(np.mean(diff * diff))
    loss_w = float(
        -np.mean(bits * np.log(soft) + (1.0 - bits) * np.log(1.0 - soft))
    )
    return loss_i, loss_w


def train(decoder: ToyDecoder, codec, cfg: TrainConfig) -> tuple[dict, TrainTrace]:
    """Embed ``cfg.message`` into the decoder via adapters; returns the trace.

    The base decoder and the extractor are never written: the optimizer owns
    only the adapter factor arrays, and the extractor must arrive frozen.
    """
    if not getattr(codec, "frozen", False):
        raise ValueError("extractor must be frozen before embedding training")
    if codec.n != cfg.message.n:
        raise ValueError(
            f"payload has {cfg.message.n} bits but extractor emits {codec.n}"
        )

    rng = Rng(cfg.seed)
    adapters = init_adapters(
        decoder, cfg.injection, cfg.rank, cfg.alpha, cfg.variant,
        rng.substream("adapters"), cfg.alpha_over_r,
    )
    params = {
        f"{target}.{key}": arr
        for target, ad in adapters.items()
        for key, arr in ad.trainable_arrays().items()
    }
    opt_kw = {}
    if cfg.optimizer == "adam":
        opt_kw = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, **opt_kw)

    pool = make_latents(cfg.latent_pool, rng.substream("latents"), decoder.config)
    clean_pool = _decode_in_batches(pool, decoder)
    eval_latents = make_latents(
        cfg.eval_batch, rng.substream("eval-latents"), decoder.config
    )
    clean_eval = _decode_in_batches(eval_latents, decoder)
    batch_rng = rng.substream("batches")

    bits = cfg.message.as_array()
    bits_batch = np.broadcast_to(bits, (cfg.batch, cfg.message.n))

    controller_on = cfg.fixed_weights is None
    state = DlwtState() if controller_on else DlwtState(*cfg.fixed_weights)

    trace = TrainTrace(
        trainable_params=sum(param_count(ad) for ad in adapters.values()),
        decoder_params=decoder.param_count(),
    )
    start = time.perf_counter()
    targets_met_streak = 0
    stop = False

    def run_eval(step: int) -> None:
        nonlocal state, targets_met_streak, stop
        # weights recorded in the row are the ones training just used,
        # i.e. before this eval's controller update
        weights = (state.image_weight, state.watermark_weight)
        marked = _decode_in_batches(eval_latents, decoder, adapters)
        psnrs = [psnr(marked[i], clean_eval[i]) for i in range(marked.shape[0])]
        psnr_now = float(np.mean(psnrs))
        logits, _ = codec.forward(marked)
        soft = np.clip(sigmoid(logits.astype(np.float64)), SOFT_EPS, 1.0 - SOFT_EPS)
        acc_now = bit_accuracy(soft, cfg.message)
        loss_i, loss_w = _eval_losses(marked, clean_eval, soft, bits)
        total = weights[0] * loss_i + weights[1] * loss_w
        branch = 0
        if controller_on:
            state, branch = dlwt_step(state, psnr_now, acc_now, cfg.dlwt)
        trace.rows.append(
            TraceRow(
                step, psnr_now, acc_now, weights[0], weights[1],
                loss_i, loss_w, total, branch,
                time.perf_counter() - start,
            )
        )
        trace.final_psnr, trace.final_acc = psnr_now, acc_now
        if trace.at99_step is None and acc_now >= cfg.acc_target_for_at:
            trace.at99_step = step
            trace.at99_seconds = time.perf_counter() - start
        if psnr_now >= cfg.dlwt.psnr_target and acc_now == 1.0:
            targets_met_streak += 1
        else:
            targets_met_streak = 0
        weights_cleared = (not controller_on) or (
            state.image_weight == 0.0 and state.watermark_weight == 0.0
        )
        if targets_met_streak >= cfg.early_stop_patience and weights_cleared:
            stop = True

    steps_done = 0
    for step in range(cfg.steps):
        if step % cfg.eval_every == 0:
            run_eval(step)
            if stop:
                trace.early_stopped = True
                break

        idx = batch_rng.integers(0, cfg.latent_pool, (cfg.batch,))
        z, clean = pool[idx], clean_pool[idx]
        marked, cache = decode_forward(z, decoder, adapters)
        diff = marked.astype(np.float64) - clean.astype(np.float64)
        loss_i = float(np.mean(diff * diff))

        logits, codec_cache = codec.forward(marked)
        soft = np.clip(sigmoid(logits.astype(np.float64)), SOFT_EPS, 1.0 - SOFT_EPS)
        loss_w = float(
            -np.mean(bits * np.log(soft) + (1.0 - bits) * np.log(1.0 - soft))
        )
        total = state.image_weight * loss_i + state.watermark_weight * loss_w
        if not np.isfinite(total):
            trace.diverged = True
            trace.steps_run = steps_done
            raise TrainingDiverged(f"non-finite loss at step {step}", trace)

        grad_image = (state.image_weight * 2.0 / marked.size) * diff
        if state.watermark_weight > 0.0:
            grad_logits = (
                state.watermark_weight * (soft - bits_batch) / soft.size
            ).astype(F32)
            grad_from_codec, _ = codec.backward(grad_logits, codec_cache)
            grad_image = grad_image + grad_from_codec
        factor_grads = decode_backward(grad_image.astype(F32), cache)
        opt.step(
            {
                f"{target}.{key}": g
                for target, grads in factor_grads.items()
                for key, g in grads.items()
            }
        )
        steps_done = step + 1

    if not trace.early_stopped:
        run_eval(steps_done)
    trace.steps_run = steps_done
    return adapters, trace
