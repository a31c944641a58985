import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vvca.domain import AuctionSize, sample_batch
from vvca.harness import fd_grad_F
from vvca.mechanism import VvcaParams
from vvca.odvvca import (FALLBACK, GradientEstimate, SmoothingConfig, TrainConfig,
                         estimate_grad_Z, evaluate, evaluate_stream, grad_F,
                         tuned_defaults, train, welfare_mean, z_direction_samples)
from vvca.winner import count_sweeps

from conftest import random_params


class TestDefaults:
    @pytest.mark.parametrize("setting,n,m,expected", [
        ("A", 2, 2, (0.01, 0.01, 1024)),
        ("A", 5, 10, (0.0003, 0.001, 1024)),
    ])
    def test_table(self, setting, n, m, expected):
        lr, sigma, batch, fallback = tuned_defaults(setting, AuctionSize(n, m))
        assert (lr, sigma, batch) == expected and not fallback

    def test_fallback(self):
        lr, sigma, batch, fallback = tuned_defaults("A", AuctionSize(7, 3))
        assert fallback and (lr, sigma, batch) == FALLBACK

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            SmoothingConfig(sigma=0.0)


class TestGradF:
    def test_finite_differences(self, rng):
        checked = 0
        while checked < 30:
            size = AuctionSize(int(rng.integers(2, 4)), 3)
            values = sample_batch("ABCD"[checked % 4], size, 1,
                                  int(rng.integers(2 ** 31))).values
            params = random_params(size, rng, 0.5)
            fd_a, fd_l, stable = fd_grad_F(values, params)
            if not stable:
                continue
            g = grad_F(values, params)
            scale = max(1.0, np.abs(g.d_lambda).max(), np.abs(g.d_alpha).max())
            assert np.abs(g.d_alpha - fd_a).max() / scale <= 1e-4
            assert np.abs(g.d_lambda - fd_l).max() / scale <= 1e-4
            checked += 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 31))
    def test_lambda_bound(self, n, m, seed):
        size = AuctionSize(n, m)
        rng = np.random.default_rng(seed)
        params = random_params(size, rng)
        g = grad_F(sample_batch("A", size, 40, seed), params)
        bound = (1.0 / params.weights).sum()
        assert np.all(np.abs(g.d_lambda) <= bound + 1e-12)

    def test_batch_mean_is_mean_of_profiles(self, rng):
        size = AuctionSize(3, 3)
        values = sample_batch("D", size, 20, 3).values
        params = random_params(size, rng)
        whole = grad_F(values, params)
        parts = [grad_F(values[p:p + 1], params) for p in range(20)]
        assert np.allclose(whole.d_alpha, np.mean([g.d_alpha for g in parts], axis=0))
        assert np.allclose(whole.d_lambda, np.mean([g.d_lambda for g in parts], axis=0))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            grad_F(np.zeros((0, 2, 4)), VvcaParams.zeros(AuctionSize(2, 2)))


class TestSmoothedZ:
    def test_single_bidder_alpha_terms_vanish(self, rng):
        """With one bidder and no boosts, rescaling w never moves the argmax."""
        size = AuctionSize(1, 3)
        values = sample_batch("D", size, 64, 0).values
        params = VvcaParams.zeros(size)
        base = welfare_mean(values, params.weights, params.lam)
        for e in rng.standard_normal(32):
            z = welfare_mean(values, np.exp(params.alpha + 0.1 * e), params.lam)
            assert (z - base) / 0.1 * e == 0.0

    def test_deterministic(self, fixture_2x2a):
        params = VvcaParams.zeros(AuctionSize(2, 2))
        cfg = SmoothingConfig(0.01, 16)
        a = estimate_grad_Z(fixture_2x2a, params, cfg, np.random.default_rng(5))
        b = estimate_grad_Z(fixture_2x2a, params, cfg, np.random.default_rng(5))
        assert np.array_equal(a.d_alpha, b.d_alpha) and np.array_equal(a.d_lambda, b.d_lambda)

    def test_sweep_count_per_estimate(self, fixture_2x2a):
        params = VvcaParams.zeros(AuctionSize(2, 2))
        with count_sweeps() as c:
            estimate_grad_Z(fixture_2x2a, params, SmoothingConfig(0.01, 8),
                            np.random.default_rng(0), baseline=1.0)
        assert c.sweeps == 8

    def test_estimator_matches_smoothed_difference(self, fixture_2x2a):
        """Estimator mean agrees with a common-random-number difference of Z~."""
        values = fixture_2x2a.values
        params = VvcaParams.zeros(AuctionSize(2, 2))
        sigma, h, coord = 0.05, 0.0125, (0, 3)
        rng = np.random.default_rng(1)
        _, lam_terms, _ = z_direction_samples(values, params, SmoothingConfig(sigma, 2000), rng)
        est = lam_terms[:, coord[0], coord[1]]
        diffs = []
        for _ in range(20000):
            e = rng.standard_normal(2)
            d = rng.standard_normal((2, 4))
            z = []
            for sgn in (1.0, -1.0):
                lam = params.lam + sigma * d
                lam[coord] += sgn * h
                z.append(welfare_mean(values, np.exp(params.alpha + sigma * e), lam))
            diffs.append((z[0] - z[1]) / (2 * h))
        diffs = np.array(diffs)
        se = np.hypot(est.std(ddof=1) / np.sqrt(len(est)), diffs.std(ddof=1) / np.sqrt(len(diffs)))
        assert abs(est.mean() - diffs.mean()) <= 3 * se


class TestBaseline:
    def test_baseline_keeps_mean_and_cuts_variance(self, fixture_2x2a):
        params = VvcaParams.zeros(AuctionSize(2, 2))
        cfg = SmoothingConfig(0.01, 10_000)
        with_base = z_direction_samples(fixture_2x2a, params, cfg, np.random.default_rng(7))[1]
        without = z_direction_samples(fixture_2x2a, params, cfg, np.random.default_rng(7),
                                      subtract_baseline=False)[1]
        a, b = with_base[:, 0, 3], without[:, 0, 3]
        se = np.hypot(a.std(ddof=1), b.std(ddof=1)) / np.sqrt(len(a))
        assert abs(a.mean() - b.mean()) <= 3 * se
        assert a.var() < b.var()


class TestEvaluate:
    def test_stream_matches_batch(self, rng):
        size = AuctionSize(2, 3)
        params = random_params(size, rng)
        batch = sample_batch("C", size, 20000, 4)
        a = evaluate(params, batch)
        b = evaluate_stream(params, "C", size, 20000, 4, chunk_size=8192)
        assert a.count == b.count == 20000
        assert a.r_mean == pytest.approx(b.r_mean, rel=1e-12)
        assert a.payment_means.sum() == pytest.approx(a.r_mean)
        assert a.r_stderr > 0


class TestTrain:
    def _cfg(self, **kw):
        base = dict(iterations=5, batch_size=64, eval_size=256, eval_every=2,
                    smoothing=SmoothingConfig(0.01, 4))
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_learning_rate_keeps_vcg(self):
        size = AuctionSize(2, 2)
        for opt in ("sgd", "adam"):
            params, report = train("A", size, self._cfg(learning_rate=0.0, optimizer=opt))
            assert np.array_equal(params.alpha, np.zeros(2))
            assert np.array_equal(params.lam, np.zeros((2, 4)))

    def test_curve_schedule(self, tmp_path):
        _, report = train("A", AuctionSize(2, 2), self._cfg())
        assert [row["iteration"] for row in report.curve] == [0, 2, 4, 5]
        assert report.final.r_mean == report.curve[-1]["r_mean"]
        report.write_csv(tmp_path / "c.csv", include_time=False)
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == ("iteration,r_mean,z_mean,f_mean,grad_norm_alpha,"
                            "grad_norm_lambda,wall_ms")
        assert all(line.endswith(",0") for line in lines[1:])

    def test_reproducible(self, tmp_path):
        size = AuctionSize(2, 3)
        runs = []
        for k in range(2):
            params, report = train("B", size, self._cfg(seed=3))
            report.write_csv(tmp_path / f"{k}.csv", include_time=False)
            runs.append(params)
        assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()
        assert np.array_equal(runs[0].lam, runs[1].lam)

    def test_sweeps_per_iteration(self):
        """One OD iteration costs (n + 1) + n_r batched sweeps."""
        size = AuctionSize(3, 2)
        counts = []
        for iters in (3, 4):
            with count_sweeps() as c:
                train("A", size, self._cfg(iterations=iters, eval_every=100))
            counts.append(c.sweeps)
        assert counts[1] - counts[0] == (3 + 1) + 4

    def test_fo_skips_smoothing(self):
        size = AuctionSize(3, 2)
        counts = []
        for iters in (3, 4):
            with count_sweeps() as c:
                train("A", size, self._cfg(method="FO_VVCA", iterations=iters, eval_every=100))
            counts.append(c.sweeps)
        assert counts[1] - counts[0] == 3 + 1

    def test_rejects_other_methods(self):
        with pytest.raises(ValueError):
            train("A", AuctionSize(2, 2), self._cfg(method="VCG"))

    def test_gradient_estimate_ops(self):
        g = GradientEstimate(np.array([3.0]), np.array([[4.0, 0.0]]))
        assert g.norm == 5.0
        assert (g + g).scaled(0.5).norm == 5.0
        assert g.is_finite()
