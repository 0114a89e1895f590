import numpy as np
import pytest

from lowmark import lora
from lowmark.kernels import Rng, finite_difference_grad, svd_truncated

from util import rel_err


def random_trained_adapter(variant, d, k, rank, alpha, rng, base=None):
    """Adapter with non-trivial factors, as after some training."""
    ad = lora.lora_init(d, k, rank, 1.0 if variant == lora.PISSA else alpha,
                        variant, base, rng)
    ad.a = rng.normal(ad.a.shape, std=0.3)
    ad.b = rng.normal(ad.b.shape, std=0.3)
    if variant == lora.LOHA:
        ad.a2 = rng.normal(ad.a2.shape, std=0.3)
        ad.b2 = rng.normal(ad.b2.shape, std=0.3)
    return ad


class TestInit:
    @pytest.mark.parametrize("variant", [lora.LORA, lora.LOHA])
    def test_initial_delta_is_zero(self, variant):
        ad = lora.lora_init(6, 9, 3, 2.0, variant, None, Rng(1))
        assert not lora.delta_weights(ad).any()

    def test_pissa_diagonal(self):
        base = np.diag([3.0, 2.0, 1.0]).astype(np.float32)
        ad = lora.lora_init(3, 3, 2, 1.0, lora.PISSA, base, Rng(2))
        np.testing.assert_allclose(ad.b @ ad.a, np.diag([3.0, 2.0, 0.0]), atol=1e-6)
        np.testing.assert_allclose(ad.residual_base, np.diag([0.0, 0.0, 1.0]), atol=1e-6)

    def test_pissa_reconstructs_base(self):
        rng = Rng(3)
        base = rng.normal((8, 6))
        ad = lora.lora_init(8, 6, 3, 1.0, lora.PISSA, base, rng)
        recon = ad.residual_base + lora.delta_weights(ad)
        assert np.linalg.norm(recon - base) <= 1e-5

    def test_pissa_rejects_scaled_alpha(self):
        base = Rng(4).normal((4, 4))
        with pytest.raises(ValueError, match="alpha == 1"):
            lora.lora_init(4, 4, 2, 2.0, lora.PISSA, base, Rng(4))

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            lora.lora_init(4, 4, 5, 1.0, lora.LORA, None, Rng(5))

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            lora.lora_init(4, 4, 2, 1.0, "vera", None, Rng(5))


class TestDeltaWeights:
    def test_zero_alpha(self):
        ad = random_trained_adapter(lora.LORA, 4, 5, 2, 0.0, Rng(6))
        assert not lora.delta_weights(ad).any()

    def test_hand_multiplied(self):
        ad = lora.lora_init(2, 2, 1, 1.0, lora.LORA, None, Rng(7))
        ad.b = np.array([[1.0], [0.0]], dtype=np.float32)
        ad.a = np.array([[2.0, 3.0]], dtype=np.float32)
        np.testing.assert_allclose(
            lora.delta_weights(ad), [[2.0, 3.0], [0.0, 0.0]], atol=1e-7
        )

    def test_loha_with_all_ones_mask_equals_lora(self):
        rng = Rng(8)
        ad = random_trained_adapter(lora.LOHA, 5, 7, 2, 1.5, rng)
        ad.b2 = np.ones_like(ad.b2)
        ad.a2 = np.zeros_like(ad.a2)
        ad.a2[0, :] = 1.0  # b2 @ a2 == all-ones
        plain = lora.LoraAdapter(lora.LORA, 2, 1.5, a=ad.a, b=ad.b)
        np.testing.assert_allclose(
            lora.delta_weights(ad), lora.delta_weights(plain), atol=1e-6
        )

    def test_alpha_over_r_mode(self):
        ad = random_trained_adapter(lora.LORA, 4, 4, 2, 4.0, Rng(9))
        ad.alpha_over_r = True
        np.testing.assert_allclose(
            lora.delta_weights(ad), 2.0 * (ad.b @ ad.a), atol=1e-6
        )


class TestMerge:
    def test_zero_delta_returns_base(self):
        rng = Rng(10)
        base = rng.normal((6, 8))
        ad = lora.lora_init(6, 8, 2, 1.0, lora.LORA, None, rng)
        assert np.array_equal(lora.merge(base, ad), base)

    def test_pissa_merge_after_init_recovers_base(self):
        rng = Rng(11)
        base = rng.normal((8, 6))
        ad = lora.lora_init(8, 6, 3, 1.0, lora.PISSA, base, rng)
        assert np.linalg.norm(lora.merge(base, ad) - base) <= 1e-5

    @pytest.mark.parametrize("variant", [lora.LORA, lora.PISSA, lora.LOHA])
    def test_unmerge_roundtrip(self, variant):
        rng = Rng(12)
        base = rng.normal((7, 5))
        ad = random_trained_adapter(variant, 7, 5, 2, 1.3, rng, base)
        merged = lora.merge(base, ad)
        back = lora.unmerge(merged, ad)
        # pissa's effective base is its residual; lora/loha recover base itself
        want = ad.residual_base if variant == lora.PISSA else base
        assert np.abs(back - want).max() <= 1e-6

    def test_shape_mismatch(self):
        ad = random_trained_adapter(lora.LORA, 4, 4, 2, 1.0, Rng(13))
        with pytest.raises(ValueError):
            lora.merge(np.zeros((5, 4), dtype=np.float32), ad)

    def test_numerical_rank_bounded(self):
        rng = Rng(14)
        for variant in (lora.LORA, lora.PISSA):
            base = rng.normal((12, 9))
            ad = random_trained_adapter(variant, 12, 9, 3, 1.0, rng, base)
            delta = lora.delta_weights(ad).astype(np.float64)
            _, s, _ = svd_truncated(delta, 9)
            assert np.sum(s > 1e-6 * s[0]) <= 3


class TestAdapterGrads:
    def test_zero_grad(self):
        ad = random_trained_adapter(lora.LOHA, 4, 6, 2, 1.0, Rng(15))
        grads = lora.adapter_grads(np.zeros((4, 6), dtype=np.float32), ad)
        assert all(not g.any() for g in grads.values())

    def test_two_by_two_hand_expanded(self):
        # delta = alpha * b @ a with b = [[b0],[b1]], a = [[a0, a1]]
        ad = lora.LoraAdapter(
            lora.LORA, 1, 2.0,
            a=np.array([[3.0, 5.0]], dtype=np.float32),
            b=np.array([[7.0], [11.0]], dtype=np.float32),
        )
        g = np.array([[1.0, 2.0], [4.0, 8.0]], dtype=np.float32)
        grads = lora.adapter_grads(g, ad)
        # dL/db = alpha * g @ a.T ; dL/da = alpha * b.T @ g
        np.testing.assert_allclose(grads["b"], 2.0 * g @ ad.a.T, atol=1e-6)
        np.testing.assert_allclose(grads["a"], 2.0 * ad.b.T @ g, atol=1e-6)
        assert grads["b"][0, 0] == pytest.approx(2.0 * (1 * 3 + 2 * 5))

    @pytest.mark.parametrize("variant", [lora.LORA, lora.PISSA, lora.LOHA])
    def test_matches_finite_differences(self, variant):
        rng = Rng(16)
        d, k, r = 5, 7, 3
        base = rng.normal((d, k))
        ad = random_trained_adapter(variant, d, k, r, 1.7, rng, base)
        for name, arr in ad.trainable_arrays().items():
            ad_f64 = arr.astype(np.float64)
            target = rng.normal((d, k)).astype(np.float64)

            def loss(v, name=name):
                saved = getattr(ad, name)
                setattr(ad, name, v.astype(np.float32))
                out = float(np.sum(lora.delta_weights(ad).astype(np.float64) * target))
                setattr(ad, name, saved)
                return out

            want = finite_difference_grad(loss, ad_f64.copy(), 1e-3)
            got = lora.adapter_grads(target.astype(np.float32), ad)[name]
            assert rel_err(got, want) <= 1e-4


class TestParamCount:
    def test_formula(self):
        ad = random_trained_adapter(lora.LORA, 64, 576, 40, 1.0, Rng(17))
        assert lora.param_count(ad) == 25_600

    def test_minimal(self):
        ad = lora.lora_init(1, 1, 1, 1.0, lora.LORA, None, Rng(18))
        assert lora.param_count(ad) == 2

    def test_loha_doubles(self):
        plain = random_trained_adapter(lora.LORA, 8, 12, 3, 1.0, Rng(19))
        had = random_trained_adapter(lora.LOHA, 8, 12, 3, 1.0, Rng(19))
        assert lora.param_count(had) == 2 * lora.param_count(plain)


class TestWeightView:
    def test_roundtrip(self):
        view = lora.WeightView((4, 3, 3, 3))
        assert (view.d, view.k) == (4, 27)
        kernel = Rng(20).normal((4, 3, 3, 3))
        mat = view.to_matrix(kernel)
        assert np.array_equal(view.to_kernel(mat), kernel)
