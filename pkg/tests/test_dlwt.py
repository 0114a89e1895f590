import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowmark.dlwt import (
    BRANCH_DECAY,
    BRANCH_RAISE_BOTH,
    BRANCH_RAISE_IMAGE,
    BRANCH_RAISE_WATERMARK,
    DlwtConfig,
    DlwtState,
    dlwt_step,
)

CFG = DlwtConfig(psnr_target=30.0, acc_target=0.95, gain=0.1, decay_rate=1.0)


class TestHandTraces:
    def test_branch1_raises_watermark_weight(self):
        state, branch = dlwt_step(DlwtState(1.0, 0.0), 35.0, 0.80, CFG)
        assert branch == BRANCH_RAISE_WATERMARK
        assert state.image_weight == pytest.approx(1.0)
        assert state.watermark_weight == pytest.approx(0.1)

    def test_branch2_raises_image_weight(self):
        state, branch = dlwt_step(DlwtState(0.5, 0.5), 28.0, 0.97, CFG)
        assert branch == BRANCH_RAISE_IMAGE
        assert state.image_weight == pytest.approx(0.6)
        assert state.watermark_weight == pytest.approx(0.5)

    def test_branch3_proportional_raise(self):
        state, branch = dlwt_step(DlwtState(0.5, 0.5), 27.0, 0.90, CFG)
        assert branch == BRANCH_RAISE_BOTH
        assert state.image_weight == pytest.approx(0.5 + 0.1 * (3.0 / 30.0))
        assert state.watermark_weight == pytest.approx(0.5 + 0.1 * (0.05 / 0.95))

    def test_branch4_clamps_at_zero(self):
        state, branch = dlwt_step(DlwtState(0.05, 0.02), 31.0, 0.96, CFG)
        assert branch == BRANCH_DECAY
        assert state == DlwtState(0.0, 0.0)

    def test_boundary_tie_falls_through_to_decay(self):
        # psnr exactly at target: neither strict inequality holds
        state, branch = dlwt_step(DlwtState(1.0, 1.0), 30.0, 0.99, CFG)
        assert branch == BRANCH_DECAY
        assert state == DlwtState(0.9, 0.9)


class TestValidation:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            dlwt_step(DlwtState(), float("nan"), 0.5, CFG)
        with pytest.raises(ValueError):
            dlwt_step(DlwtState(), 30.0, float("nan"), CFG)

    def test_rejects_acc_out_of_range(self):
        with pytest.raises(ValueError):
            dlwt_step(DlwtState(), 30.0, 1.5, CFG)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            DlwtConfig(gain=0.0)
        with pytest.raises(ValueError):
            DlwtConfig(acc_target=0.0)

    def test_rejects_negative_state(self):
        with pytest.raises(ValueError):
            DlwtState(-0.1, 0.0)


branch_inputs = st.tuples(
    st.floats(min_value=0.0, max_value=3.0),  # image weight
    st.floats(min_value=0.0, max_value=3.0),  # watermark weight
    st.floats(min_value=0.0, max_value=60.0),  # current psnr
    st.floats(min_value=0.0, max_value=1.0),  # current acc
)


class TestProperties:
    @given(branch_inputs)
    @settings(max_examples=300, deadline=None)
    def test_non_negative_and_single_branch(self, inputs):
        li, lw, p, a = inputs
        state, branch = dlwt_step(DlwtState(li, lw), p, a, CFG)
        assert state.image_weight >= 0.0
        assert state.watermark_weight >= 0.0
        assert branch in (1, 2, 3, 4)

    @given(branch_inputs)
    @settings(max_examples=300, deadline=None)
    def test_monotone_responses(self, inputs):
        li, lw, p, a = inputs
        state, branch = dlwt_step(DlwtState(li, lw), p, a, CFG)
        if branch == BRANCH_RAISE_WATERMARK:
            assert state.watermark_weight > lw
            assert state.image_weight == li
        elif branch == BRANCH_RAISE_IMAGE:
            assert state.image_weight > li
            assert state.watermark_weight == lw
        elif branch == BRANCH_DECAY:
            assert state.image_weight <= li
            assert state.watermark_weight <= lw

    def test_fixed_point_reached_within_bound(self):
        # once targets are persistently met, both weights hit zero within
        # ceil(max(weights) / decay step) calls
        state = DlwtState(1.0, 0.73)
        bound = math.ceil(max(state.image_weight, state.watermark_weight)
                          / (CFG.decay_rate * CFG.gain))
        for _ in range(bound):
            state, branch = dlwt_step(state, 35.0, 1.0, CFG)
            assert branch == BRANCH_DECAY
        assert state == DlwtState(0.0, 0.0)
        state, _ = dlwt_step(state, 35.0, 1.0, CFG)
        assert state == DlwtState(0.0, 0.0)  # absorbing
