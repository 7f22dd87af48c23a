"""Watermark pools, risk metrics (with exhaustive oracles), codec training."""

import math

import numpy as np
import pytest
import torch

from esmakit.watermark import (
    MessagePool,
    build_message_pools,
    distortion_loss,
    erasure_bit_error_rate,
    erasure_detection_rate,
    gaussian_baseline,
    load_pools,
    psnr,
    save_pools,
    tamper_bit_metric,
    tamper_detection_rate,
)
from esmakit.watermark.jpeg import jpeg_approx
from esmakit.watermark.metrics import gaussian_matching_norm, mean_psnr


class StubDecoder:
    """Deterministic decoder: fixed message table indexed by image checksum."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.uint8) for k, v in table.items()}

    def decode(self, images):
        return np.stack([self.table[round(float(img.sum()), 6)] for img in images])


def _img(value, shape=(1, 2, 2)):
    return np.full(shape, value, dtype=np.float64)


class TestMessagePools:
    def test_exp1_singleton_pools(self):
        pools = build_message_pools(4, 1, 5, seed=0)
        assert [p.size for p in pools] == [1, 1, 1, 1]
        stacked = np.concatenate([p.messages for p in pools])
        assert len(np.unique(stacked, axis=0)) == 4

    def test_capacity_edge_exhausts_space(self):
        pools = build_message_pools(4, 8, 5, seed=1)
        stacked = np.concatenate([p.messages for p in pools])
        assert len(np.unique(stacked, axis=0)) == 32 == 2**5

    def test_capacity_exceeded(self):
        with pytest.raises(ValueError, match="distinct"):
            build_message_pools(5, 8, 5, seed=0)

    def test_same_seed_identical(self):
        a = build_message_pools(3, 8, 12, seed=7)
        b = build_message_pools(3, 8, 12, seed=7)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.messages, pb.messages)
            np.testing.assert_array_equal(pa.active, pb.active)

    def test_active_subset_default(self):
        pools = build_message_pools(2, 8, 10, seed=3)
        assert all(len(p.active) == 4 for p in pools)
        pools = build_message_pools(2, 3, 10, seed=3)
        assert all(len(p.active) == 3 for p in pools)

    def test_disjointness_across_enterprises(self):
        pools = build_message_pools(4, 8, 8, seed=5)
        for i in range(4):
            for j in range(i + 1, 4):
                a = {tuple(m) for m in pools[i].messages}
                b = {tuple(m) for m in pools[j].messages}
                assert not a & b

    def test_long_messages(self):
        pools = build_message_pools(3, 8, 64, seed=9)
        stacked = np.concatenate([p.messages for p in pools])
        assert len(np.unique(stacked, axis=0)) == 24

    def test_text_roundtrip(self, tmp_path):
        pools = build_message_pools(3, 8, 7, seed=11)
        save_pools(pools, tmp_path / "pools.txt")
        loaded = load_pools(tmp_path / "pools.txt")
        for a, b in zip(pools, loaded):
            assert a.enterprise_id == b.enterprise_id
            np.testing.assert_array_equal(a.messages, b.messages)
            np.testing.assert_array_equal(a.active, b.active)


class TestErasureMetrics:
    def test_unattacked_is_zero(self):
        imgs = [_img(0.1), _img(0.2)]
        decoder = StubDecoder({0.4: [0, 1, 1], 0.8: [1, 0, 0]})
        batch = np.stack(imgs)
        assert erasure_bit_error_rate(decoder, batch, batch) == 0.0
        assert erasure_detection_rate(decoder, batch, batch) == 0.0

    def test_all_bits_flipped(self):
        encoded = np.stack([_img(0.1)])
        attacked = np.stack([_img(0.3)])
        decoder = StubDecoder({0.4: [0, 0, 0], 1.2: [1, 1, 1]})
        assert erasure_bit_error_rate(decoder, encoded, attacked) == 1.0
        assert erasure_detection_rate(decoder, encoded, attacked) == 1.0

    def test_single_bit_difference_detection(self):
        encoded = np.stack([_img(0.1), _img(0.2)])
        attacked = np.stack([_img(0.3), _img(0.4)])
        decoder = StubDecoder(
            {0.4: [0, 0, 0], 0.8: [1, 1, 1], 1.2: [0, 0, 1], 1.6: [1, 1, 0]}
        )
        assert erasure_detection_rate(decoder, encoded, attacked) == 1.0
        assert erasure_bit_error_rate(decoder, encoded, attacked) == pytest.approx(1 / 3)

    def test_matches_hamming_oracle_random(self):
        rng = np.random.default_rng(0)
        length = 11
        n = 20
        before = rng.integers(0, 2, size=(n, length)).astype(np.uint8)
        after = rng.integers(0, 2, size=(n, length)).astype(np.uint8)
        calls = {"n": 0}

        def decoder(images):
            calls["n"] += 1
            return before if calls["n"] % 2 == 1 else after

        expected_bits = 0
        expected_det = 0
        for i in range(n):
            d = sum(int(before[i, j] != after[i, j]) for j in range(length))
            expected_bits += d / length
            expected_det += int(d > 0)
        dummy = np.zeros((n, 1, 2, 2))
        assert erasure_bit_error_rate(decoder, dummy, dummy) == pytest.approx(
            expected_bits / n, rel=1e-12
        )
        assert erasure_detection_rate(decoder, dummy, dummy) == pytest.approx(
            expected_det / n, rel=1e-12
        )

    def test_detection_complement_identity(self):
        rng = np.random.default_rng(1)
        n, length = 30, 6
        before = rng.integers(0, 2, size=(n, length)).astype(np.uint8)
        after = before.copy()
        flip = rng.random(n) < 0.5
        after[flip] ^= 1
        state = {"first": True}

        def decoder(images):
            first = state["first"]
            state["first"] = not first
            return before if first else after

        dummy = np.zeros((n, 1, 1, 1))
        rate = erasure_detection_rate(decoder, dummy, dummy)
        exact_match_fraction = float((~flip).mean())
        assert rate == pytest.approx(1.0 - exact_match_fraction, rel=1e-12)


class TestTamperMetrics:
    def _pool(self, rows):
        return MessagePool(enterprise_id=0, messages=np.asarray(rows, dtype=np.uint8))

    def test_decode_in_pool_gives_zero_closest(self):
        pool = self._pool([[0, 1, 0], [1, 1, 1]])
        decoder = StubDecoder({0.4: [0, 1, 0], 0.8: [1, 1, 1]})
        attacked = np.stack([_img(0.1), _img(0.2)])
        assert tamper_bit_metric(decoder, attacked, pool, mode="closest") == 0.0
        assert tamper_detection_rate(decoder, attacked, pool) == 1.0

    def test_singleton_pool_modes_coincide(self):
        pool = self._pool([[1, 0, 1]])
        decoder = StubDecoder({0.4: [1, 1, 1]})
        attacked = np.stack([_img(0.1)])
        closest = tamper_bit_metric(decoder, attacked, pool, mode="closest")
        printed = tamper_bit_metric(decoder, attacked, pool, mode="as_printed")
        assert closest == printed == pytest.approx(1 / 3)

    def test_no_decode_in_pool(self):
        pool = self._pool([[0, 0, 0]])
        decoder = StubDecoder({0.4: [1, 1, 1]})
        attacked = np.stack([_img(0.1)])
        assert tamper_detection_rate(decoder, attacked, pool) == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        n, n_p, length = 50, 8, 9
        decodes = rng.integers(0, 2, size=(n, length)).astype(np.uint8)
        pool = MessagePool(
            enterprise_id=1,
            messages=np.unique(rng.integers(0, 2, size=(n_p * 3, length)), axis=0)[:n_p],
        )

        def decoder(images):
            return decodes

        dummy = np.zeros((n, 1, 1, 1))
        for mode, select in (("closest", min), ("as_printed", max)):
            expected = 0.0
            for i in range(n):
                dists = [
                    sum(int(decodes[i, b] != m[b]) for b in range(length))
                    for m in pool.messages
                ]
                expected += select(dists) / length
            expected /= n
            assert tamper_bit_metric(decoder, dummy, pool, mode=mode) == pytest.approx(
                expected, rel=1e-12
            )
        expected_det = np.mean(
            [any((decodes[i] == m).all() for m in pool.messages) for i in range(n)]
        )
        assert tamper_detection_rate(decoder, dummy, pool) == pytest.approx(
            float(expected_det), rel=1e-12
        )

    def test_membership_implies_zero_nearest_distance(self):
        rng = np.random.default_rng(3)
        pool = MessagePool(enterprise_id=0, messages=rng.integers(0, 2, size=(4, 6)).astype(np.uint8))
        decodes = pool.messages[[0, 2, 1]]

        def decoder(images):
            return decodes

        dummy = np.zeros((3, 1, 1, 1))
        assert tamper_detection_rate(decoder, dummy, pool) == 1.0
        assert tamper_bit_metric(decoder, dummy, pool, mode="closest") == 0.0

    def test_invalid_mode(self):
        pool = self._pool([[0, 1]])
        with pytest.raises(ValueError):
            tamper_bit_metric(lambda x: x, np.zeros((1, 1, 1, 1)), pool, mode="bogus")


class TestImageMetrics:
    def test_psnr_identical_is_inf(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        assert psnr(img, img) == math.inf

    def test_psnr_constant_difference(self):
        a = np.zeros((3, 4, 4))
        b = np.full((3, 4, 4), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((3, 5, 5)), rng.random((3, 5, 5))
        mse = np.mean((a - b) ** 2)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1.0 / mse), rel=1e-12)

    def test_distortion_loss_values(self):
        a = np.zeros((3, 4, 4))
        assert distortion_loss(a, a) == 0.0
        b = np.full((3, 4, 4), 0.1)
        assert distortion_loss(a, b) == pytest.approx(0.01, rel=1e-12)

    def test_distortion_matches_mse_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        assert distortion_loss(a, b) == pytest.approx(float(np.mean((a - b) ** 2)), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
        with pytest.raises(ValueError):
            distortion_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestGaussianBaseline:
    def test_hits_target_psnr(self):
        rng = np.random.default_rng(6)
        images = rng.random((8, 3, 16, 16))
        _, achieved, reached = gaussian_baseline(images, 27.5, seed=0)
        assert reached
        assert achieved == pytest.approx(27.5, abs=0.5)

    def test_small_sigma_limit(self):
        rng = np.random.default_rng(7)
        images = rng.random((4, 3, 8, 8)) * 0.5 + 0.25
        _, achieved, reached = gaussian_baseline(images, 60.0, seed=0)
        assert achieved == pytest.approx(60.0, abs=0.5)

    def test_noise_normality_preclamp(self):
        from scipy.stats import kstest

        from esmakit.rng import generator as make_rng

        unit = make_rng(0, "gaussian-baseline").standard_normal(5000)
        statistic, _ = kstest(unit, "norm")
        assert statistic < 0.02

    def test_norm_matched_mode(self):
        rng = np.random.default_rng(8)
        images = rng.random((6, 3, 8, 8))
        reference = np.clip(images + rng.normal(0, 0.05, images.shape), 0, 1)
        noisy, achieved = gaussian_matching_norm(images, reference, seed=1)
        ref_psnr = mean_psnr(reference, images)
        assert achieved == pytest.approx(ref_psnr, abs=2.0)


class TestJpegApprox:
    def test_preserves_shape_and_range(self):
        x = torch.rand(2, 3, 20, 20)
        y = jpeg_approx(x, 75)
        assert y.shape == x.shape
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_reasonable_fidelity(self):
        x = torch.rand(2, 3, 32, 32) * 0.5 + 0.25
        y = jpeg_approx(x, 95)
        assert psnr(x.numpy(), y.numpy()) > 20.0

    def test_quality_ordering(self):
        torch.manual_seed(0)
        x = torch.rand(1, 3, 32, 32)
        err_low = float(((jpeg_approx(x, 20) - x) ** 2).mean())
        err_high = float(((jpeg_approx(x, 90) - x) ** 2).mean())
        assert err_high < err_low

    def test_gradients_flow(self):
        x = torch.rand(1, 3, 16, 16, requires_grad=True)
        jpeg_approx(x, 75).sum().backward()
        assert x.grad is not None
        assert float(x.grad.abs().sum()) > 0.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            jpeg_approx(torch.rand(3, 16, 16), 75)
