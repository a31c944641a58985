import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vvca.domain import AuctionSize, ValuationBatch, ValuationProfile, sample_batch
from vvca.mechanism import (VvcaParams, revenue_breakdown_batch, run_auction, run_batch,
                            utility, utility_batch, zero_bidder)
from vvca.winner import Allocation, affine_welfare

from conftest import random_params


class TestParams:
    def test_shapes_checked(self):
        size = AuctionSize(2, 2)
        with pytest.raises(ValueError):
            VvcaParams(size, np.zeros(3), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            VvcaParams(size, np.zeros(2), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            VvcaParams(size, [np.nan, 0.0], np.zeros((2, 4)))

    def test_from_weights(self):
        p = VvcaParams.from_weights(AuctionSize(2, 1), [1.0, 2.0], np.zeros((2, 2)))
        assert np.allclose(p.weights, [1.0, 2.0])
        with pytest.raises(ValueError):
            VvcaParams.from_weights(AuctionSize(2, 1), [1.0, 0.0], np.zeros((2, 2)))

    def test_json_round_trip_exact(self, tmp_path, rng):
        size = AuctionSize(3, 3)
        p = random_params(size, rng)
        p.save(tmp_path / "p.json", "B", 17)
        back = VvcaParams.load(tmp_path / "p.json")
        assert np.array_equal(back.alpha, p.alpha) and np.array_equal(back.lam, p.lam)
        assert p.to_dict("B", 17)["created_from_seed"] == 17


class TestZeroBidder:
    def test_zeroes_row(self, two_by_two):
        z = zero_bidder(two_by_two, 1)
        assert np.all(z.values[1] == 0) and np.array_equal(z.values[0], two_by_two.values[0])
        assert np.array_equal(zero_bidder(z, 1).values, z.values)

    def test_single_bidder_only_boosts_remain(self, rng):
        profile = ValuationProfile.from_item_values([[0.4, 0.9]])
        params = random_params(profile.size, rng)
        z = zero_bidder(profile, 0)
        for mask in range(4):
            assert affine_welfare(z, params, Allocation((mask,))) == params.lam[0, mask]

    def test_bad_index(self, two_by_two):
        with pytest.raises(IndexError):
            zero_bidder(two_by_two, 2)


class TestRunAuction:
    def test_two_by_two_vcg(self, two_by_two):
        out = run_auction(two_by_two, VvcaParams.zeros(two_by_two.size))
        assert out.allocation.bundles == (0b01, 0b10)
        assert out.payments == pytest.approx([0.5, 0.2])
        assert out.revenue == pytest.approx(0.7)
        assert out.welfare_z == pytest.approx(1.4)
        assert out.continuous_f == pytest.approx(-0.7)

    def test_single_bidder_pays_nothing(self):
        profile = ValuationProfile.from_item_values([[0.3, 0.9, 0.2]])
        out = run_auction(profile, VvcaParams.zeros(profile.size))
        assert out.payments.tolist() == [0.0] and out.revenue == 0.0

    def test_scale_invariance(self, rng):
        size = AuctionSize(3, 3)
        profile = sample_batch("D", size, 1, 4)[0]
        params = random_params(size, rng)
        base = run_auction(profile, params)
        for c in (0.5, 2.0, 10.0):
            other = run_auction(profile, params.scaled(c))
            assert other.allocation == base.allocation
            assert other.payments == pytest.approx(base.payments, rel=1e-9, abs=1e-12)

    def test_size_mismatch(self, two_by_two):
        with pytest.raises(ValueError):
            run_auction(two_by_two, VvcaParams.zeros(AuctionSize(2, 3)))


class TestIdentities:
    @pytest.mark.parametrize("setting", ["A", "B", "C", "D"])
    def test_decomposition(self, setting, rng):
        size = AuctionSize(3, 4)
        values = sample_batch(setting, size, 500, 8).values
        out = run_batch(values, random_params(size, rng))
        assert np.allclose(out.revenue, out.z + out.f, rtol=1e-9, atol=1e-12)
        assert out.payments.min() >= -1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31),
           st.floats(0.0, 2.0))
    def test_ir_property(self, n, m, seed, scale):
        """Truthful utility is non-negative for any parameters."""
        size = AuctionSize(n, m)
        rng = np.random.default_rng(seed)
        values = sample_batch("ABCD"[seed % 4], size, 50, seed).values
        params = random_params(size, rng, scale)
        out = run_batch(values, params)
        won = np.take_along_axis(values, out.alloc[:, :, None], axis=2)[:, :, 0]
        assert np.all(won - out.payments >= -1e-9)
        assert out.payments.min() >= -1e-12

    def test_f_linear_on_stable_lambda_segments(self, rng):
        size = AuctionSize(3, 3)
        values = sample_batch("A", size, 1, 0).values
        checked = 0
        for _ in range(400):
            p1 = random_params(size, rng, 0.5)
            p2 = VvcaParams(size, p1.alpha, p1.lam + rng.normal(0, 0.01, p1.lam.shape))
            mid = VvcaParams(size, p1.alpha, (p1.lam + p2.lam) / 2)
            outs = [run_batch(values, p) for p in (p1, mid, p2)]
            keys = [(o.alloc.tobytes(), o.removed_alloc.tobytes()) for o in outs]
            if len(set(keys)) != 1:
                continue
            ends = (outs[0].f[0] + outs[2].f[0]) / 2
            assert outs[1].f[0] == pytest.approx(ends, rel=1e-9, abs=1e-12)
            checked += 1
        assert checked > 100

    def test_z_from_allocation(self, rng):
        size = AuctionSize(3, 4)
        values = sample_batch("D", size, 200, 3).values
        out = run_batch(values, random_params(size, rng))
        for p in range(200):
            assert out.z[p] == sum(values[p, i, out.alloc[p, i]] for i in range(3))

    def test_breakdown(self, rng):
        size = AuctionSize(2, 3)
        batch = sample_batch("B", size, 300, 1)
        params = random_params(size, rng)
        b = revenue_breakdown_batch(batch, params)
        assert b.r_mean == pytest.approx(b.z_mean + b.f_mean, rel=1e-9)
        one = ValuationBatch(batch.values[:1], "B", 1, True)
        single = revenue_breakdown_batch(one, params)
        direct = run_auction(batch[0], params)
        assert single.r_mean == pytest.approx(direct.revenue)
        assert single.z_mean == pytest.approx(direct.welfare_z)

    def test_vcg_2x2_revenue(self):
        b = revenue_breakdown_batch(sample_batch("A", AuctionSize(2, 2), 200_000, 0),
                                    VvcaParams.zeros(AuctionSize(2, 2)))
        assert abs(b.r_mean - 2 / 3) < 0.01

    def test_permutation_symmetry(self):
        size = AuctionSize(3, 2)
        batch = sample_batch("A", size, 2000, 2)
        params = VvcaParams.zeros(size)
        params.lam[:, 3] = 0.2
        out = run_batch(batch.values, params)
        perm = [2, 0, 1]
        swapped = run_batch(batch.values[:, perm], params)
        assert np.allclose(swapped.payments, out.payments[:, perm])
        assert swapped.revenue.mean() == pytest.approx(out.revenue.mean())

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            run_batch(-np.ones((1, 2, 4)), VvcaParams.zeros(AuctionSize(2, 2)))


class TestIncentives:
    def test_dsic_sampling_2x3(self, rng):
        size = AuctionSize(2, 3)
        true = sample_batch("A", size, 10_000, 1).values
        lie = sample_batch("A", size, 10_000, 2).values
        for params in (VvcaParams.zeros(size), random_params(size, rng, 0.5)):
            for i in range(2):
                report = true.copy()
                report[:, i] = lie[:, i]
                honest = utility_batch(true, true, params, i)
                cheat = utility_batch(true, report, params, i)
                assert honest.min() >= -1e-9
                assert np.max(cheat - honest) <= 1e-9

    def test_single_bidder(self, rng):
        profile = ValuationProfile.from_item_values([[0.4, 0.7]])
        params = VvcaParams.zeros(profile.size)
        report = ValuationProfile.from_item_values([[0.1, 0.0]])
        u = utility(profile, report, params, 0)
        out = run_auction(report, params)
        assert out.payments[0] == 0.0
        assert u == pytest.approx(profile.values[0, out.allocation[0]])

    def test_size_mismatch(self, two_by_two):
        other = ValuationProfile.from_item_values([[0.1], [0.2]])
        with pytest.raises(ValueError):
            utility(two_by_two, other, VvcaParams.zeros(two_by_two.size), 0)
