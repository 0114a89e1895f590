import math

import numpy as np
import pytest

from lowmark.codec import FixedProjectionExtractor, WatermarkMessage, extract, matched_bits
from lowmark.kernels import Rng
from lowmark.verify import (
    PayloadTooShortError,
    VerificationReport,
    detection_threshold,
    empirical_rates,
    verify,
)


def brute_force_threshold(n, budget):
    """Enumerate the full binomial PMF with integer arithmetic."""
    denom = 2**n
    for k in range(n + 1):
        tail = sum(math.comb(n, j) for j in range(k, n + 1))
        if tail <= budget * denom:
            return k
    return None


class TestDetectionThreshold:
    def test_single_bit(self):
        assert detection_threshold(1, 0.6) == 1  # tail(1,1) = 0.5 <= 0.6

    def test_two_bits_enumerated(self):
        # four outcomes: tail(2,1) = 3/4 > 0.3, tail(2,2) = 1/4 <= 0.3
        assert detection_threshold(2, 0.3) == 2

    def test_matches_brute_force_for_all_small_n(self):
        for n in range(1, 25):
            for budget in (0.05, 0.005, 0.0005):
                want = brute_force_threshold(n, budget)
                if want is None:
                    with pytest.raises(PayloadTooShortError):
                        detection_threshold(n, budget)
                else:
                    assert detection_threshold(n, budget) == want, (n, budget)

    def test_forty_eight_bits(self):
        k = detection_threshold(48, 0.005)
        assert k == brute_force_threshold(48, 0.005)

    def test_monotone_in_budget(self):
        previous = 0
        for budget in (0.5, 0.05, 0.005, 0.0005):
            k = detection_threshold(16, budget)
            assert k >= previous
            previous = k

    def test_payload_too_short(self):
        with pytest.raises(PayloadTooShortError):
            detection_threshold(4, 0.005)  # 2^-4 = 0.0625 > 0.005

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            detection_threshold(0, 0.1)
        with pytest.raises(ValueError):
            detection_threshold(8, 0.0)
        with pytest.raises(ValueError):
            detection_threshold(8, 1.0)


class TestVerify:
    MSG = WatermarkMessage.from_hex("a5c3", 16)

    def test_perfect_match(self):
        soft = np.where(np.asarray(self.MSG.bits) == 1, 0.99, 0.01)
        report = verify(soft, self.MSG, 0.005)
        assert report.detected
        assert report.matched == 16
        assert report.accuracy == 1.0
        assert report.p_value == pytest.approx(2.0**-16)

    def test_half_match_not_detected(self):
        bits = list(self.MSG.bits)
        soft = np.array(
            [0.9 if b == 1 else 0.1 for b in bits[:8]]
            + [0.1 if b == 1 else 0.9 for b in bits[8:]]
        )
        report = verify(soft, self.MSG, 0.005)
        assert report.matched == 8
        assert not report.detected
        assert report.p_value > 0.5

    def test_one_below_threshold_not_detected(self):
        k = detection_threshold(16, 0.005)
        bits = np.asarray(self.MSG.bits)
        soft = np.where(bits == 1, 0.9, 0.1).astype(float)
        flip = np.flatnonzero(bits >= 0)[: 16 - (k - 1)]
        soft[flip] = 1.0 - soft[flip]  # leave exactly k-1 matches
        report = verify(soft, self.MSG, 0.005)
        assert report.matched == k - 1
        assert not report.detected

    def test_p_value_monotone_in_matches(self):
        bits = np.asarray(self.MSG.bits)
        last = 1.1
        for matches in range(0, 17):
            soft = np.where(bits == 1, 0.9, 0.1).astype(float)
            soft[matches:] = 1.0 - soft[matches:]
            rep = verify(soft, self.MSG, 0.005)
            assert rep.matched == matches
            assert rep.p_value < last
            last = rep.p_value

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            verify(np.full(8, 0.9), self.MSG, 0.005)

    def test_report_json_round_trip(self):
        import json

        soft = np.where(np.asarray(self.MSG.bits) == 1, 0.99, 0.01)
        blob = json.loads(verify(soft, self.MSG).to_json())
        assert blob["detected"] is True
        assert blob["n"] == 16


class TestEmpiricalRates:
    def test_all_perfect_watermarked(self):
        fnr, _ = empirical_rates([16] * 50, [8] * 50, 16, 0.005)
        assert fnr == 0.0

    def test_all_below_threshold(self):
        k = detection_threshold(16, 0.005)
        fnr, _ = empirical_rates([k - 1] * 10, [0] * 10, 16, 0.005)
        assert fnr == 1.0

    def test_null_fpr_within_monte_carlo_margin(self):
        rng = Rng(314)
        clean = rng.integers(0, 2, (10_000, 16)).sum(axis=1)  # Binomial(16, 1/2)
        budget = 0.005
        _, fpr = empirical_rates([16], clean, 16, budget)
        margin = 3.0 * np.sqrt(budget * (1 - budget) / 10_000)
        assert fpr <= budget + margin

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            empirical_rates([], [1], 16, 0.005)


class TestNullCalibrationWithExtractor:
    def test_random_images_rarely_detected(self):
        # hard bits from a frozen random-projection extractor behave like
        # fair coins, so detections stay within the budgeted false positives
        rng = Rng(2718)
        dec = FixedProjectionExtractor(16, 32, rng.substream("proj"))
        images = rng.substream("imgs").uniform(0.0, 1.0, (4000, 3, 32, 32)).astype(np.float32)
        soft = extract(images, dec)
        msg = WatermarkMessage.from_hex("1234", 16)
        scores = matched_bits(soft, msg)
        budget = 0.005
        detected = np.mean(scores >= detection_threshold(16, budget))
        assert detected <= budget + 3.0 * np.sqrt(budget * (1 - budget) / 4000)
