"""Watermark validation and reliability testing.

Detection is a one-sided binomial test: under the null hypothesis that an
unmarked image yields i.i.d. fair-coin bits, the number of payload-matching
bits is Binomial(n, 1/2). The detection threshold is the smallest match
count whose null tail probability stays within the false-positive budget.
Tails are computed with exact rational arithmetic; n is small, so exactness
costs nothing and the FPR guarantee is provable rather than approximate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .codec import WatermarkMessage, matched_bits


class PayloadTooShortError(ValueError):
    """Even a perfect match cannot satisfy the requested FPR budget."""


def _null_tail(n: int, k: int) -> Fraction:
    """P[Binomial(n, 1/2) >= k], exactly."""
    total = sum(math.comb(n, j) for j in range(k, n + 1))
    return Fraction(total, 1 << n)


def detection_threshold(n: int, fpr_budget: float) -> int:
    """Smallest match count k whose null tail is <= the FPR budget."""
    if n < 1:
        raise ValueError("payload length must be >= 1")
    if not 0.0 < fpr_budget < 1.0:
        raise ValueError("fpr budget must lie strictly between 0 and 1")
    budget = Fraction(fpr_budget)
    if _null_tail(n, n) > budget:
        raise PayloadTooShortError(
            f"a {n}-bit payload cannot reach FPR <= {fpr_budget} "
            f"(best achievable is 2^-{n})"
        )
    for k in range(n + 1):
        if _null_tail(n, k) <= budget:
            return k
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class VerificationReport:
    n: int
    matched: int
    accuracy: float
    threshold: int
    fpr_budget: float
    p_value: float
    detected: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def verify(
    soft_bits: np.ndarray, message: WatermarkMessage, fpr_budget: float = 0.005
) -> VerificationReport:
    """Hard-threshold the soft bits and run the binomial detection test."""
    soft = np.asarray(soft_bits)
    if soft.ndim != 1:
        raise ValueError("verify takes a single image's soft bits")
    if soft.shape[0] != message.n:
        raise ValueError(
            f"got {soft.shape[0]} soft bits for an {message.n}-bit payload"
        )
    matched = int(matched_bits(soft, message)[0])
    threshold = detection_threshold(message.n, fpr_budget)
    return VerificationReport(
        n=message.n,
        matched=matched,
        accuracy=matched / message.n,
        threshold=threshold,
        fpr_budget=fpr_budget,
        p_value=float(_null_tail(message.n, matched)),
        detected=matched >= threshold,
    )


def empirical_rates(
    watermarked_scores, clean_scores, n: int, fpr_budget: float = 0.005
) -> tuple[float, float]:
    """(FNR, FPR) of the thresholded test over observed match counts.

    ``watermarked_scores`` and ``clean_scores`` are per-image matched-bit
    counts from marked and unmarked images respectively.
    """
    wm = np.asarray(watermarked_scores)
    clean = np.asarray(clean_scores)
    if wm.size == 0 or clean.size == 0:
        raise ValueError("score lists must be non-empty")
    k = detection_threshold(n, fpr_budget)
    fnr = float(np.mean(wm < k))
    fpr = float(np.mean(clean >= k))
    return fnr, fpr
