"""Dynamic loss-weight controller for the two-task training objective.

Balances the image-fidelity weight and the watermark weight from the current
validation PSNR and bit accuracy. Four mutually exclusive branches:

1. quality above target, accuracy below target: raise the watermark weight;
2. quality below target, accuracy at/above target: raise the image weight;
3. both below target: raise both, proportionally to the relative shortfall;
4. otherwise (both targets met, or a boundary tie): decay both toward zero.

Comparisons are strict, so exact ties fall into the decay branch. The
controller is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

BRANCH_RAISE_WATERMARK = 1
BRANCH_RAISE_IMAGE = 2
BRANCH_RAISE_BOTH = 3
BRANCH_DECAY = 4


@dataclass(frozen=True)
class DlwtConfig:
    psnr_target: float = 30.0  # dB floor the generated images should keep
    acc_target: float = 0.95  # bit-accuracy goal in (0, 1]
    gain: float = 0.1  # weight increment per controller call
    decay_rate: float = 1.0  # decay step is decay_rate * gain

    def __post_init__(self):
        if self.psnr_target <= 0 or self.gain <= 0 or self.decay_rate <= 0:
            raise ValueError("psnr_target, gain, decay_rate must be positive")
        if not 0.0 < self.acc_target <= 1.0:
            raise ValueError("acc_target must lie in (0, 1]")


@dataclass(frozen=True)
class DlwtState:
    image_weight: float = 1.0
    watermark_weight: float = 0.0

    def __post_init__(self):
        if self.image_weight < 0 or self.watermark_weight < 0:
            raise ValueError("loss weights must be non-negative")


def dlwt_step(
    state: DlwtState, psnr_now: float, acc_now: float, cfg: DlwtConfig
) -> tuple[DlwtState, int]:
    """Apply exactly one branch; returns the new state and the branch id."""
    if not math.isfinite(psnr_now) or not math.isfinite(acc_now):
        raise ValueError("psnr_now and acc_now must be finite")
    if not 0.0 <= acc_now <= 1.0:
        raise ValueError(f"acc_now {acc_now} outside [0, 1]")

    li, lw = state.image_weight, state.watermark_weight
    psnr_gap = cfg.psnr_target - psnr_now
    acc_gap = cfg.acc_target - acc_now

    if psnr_now > cfg.psnr_target and acc_now < cfg.acc_target:
        lw = lw + cfg.gain
        branch = BRANCH_RAISE_WATERMARK
    elif psnr_now < cfg.psnr_target and acc_now >= cfg.acc_target:
        li = li + cfg.gain
        branch = BRANCH_RAISE_IMAGE
    elif psnr_now < cfg.psnr_target and acc_now < cfg.acc_target:
        li = li + cfg.gain * (psnr_gap / cfg.psnr_target)
        lw = lw + cfg.gain * (acc_gap / cfg.acc_target)
        branch = BRANCH_RAISE_BOTH
    else:
        step = cfg.decay_rate * cfg.gain
        # snap accumulated float residue so N decay steps clear a weight of
        # N * step exactly, as in real arithmetic
        li = _snap(max(li - step, 0.0))
        lw = _snap(max(lw - step, 0.0))
        branch = BRANCH_DECAY
    return DlwtState(li, lw), branch


def _snap(value: float, tol: float = 1e-12) -> float:
    return 0.0 if value <= tol else value
