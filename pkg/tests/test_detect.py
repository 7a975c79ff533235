import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _reference import ep_reference, pmf_moments
from mepd.channel import ChannelConfig, gen_iid_rayleigh, gen_noise, gen_symbols, substream
from mepd.detect import (
    TRACE_HEADER,
    DetectionError,
    MepdParams,
    cavity,
    detect_epd,
    detect_lmmse,
    detect_mepd,
    detect_mepd_default,
    detect_ml,
    detect_mmse_sic,
    epd_update,
    format_trace,
    gaussian_posterior,
    mepd_update,
    ml_candidates,
    moment_match,
)
from mepd.model import (
    ComplexSystemInstance,
    ConfigurationError,
    build_constellation,
    complex_to_real,
    hard_decision,
    snr_to_complex_noise_power,
    symbol_errors,
)

C16 = build_constellation(16)
C4 = build_constellation(4)
PAM16 = C16.real_pam


def instance(seed, n_t, n_r, const=C16, snr_db=15.0):
    rng = substream(seed, n_t, n_r)
    H = gen_iid_rayleigh(ChannelConfig(n_t, n_r), rng)
    x = gen_symbols(n_t, const, rng)
    p = snr_to_complex_noise_power(snr_db, n_t, const.energy_complex)
    n = gen_noise(n_r, p, rng)
    return complex_to_real(ComplexSystemInstance.from_parts(H, x, n, p))


class TestGaussianPosterior:
    def test_identity_channel(self):
        y = np.array([1.0, -2.0, 0.5])
        c, s2 = 0.3, 0.7
        _, u = gaussian_posterior(np.eye(3), y, s2, np.full(3, c), np.zeros(3))
        assert np.allclose(u, y / (1 + c * s2), rtol=1e-14)

    def test_zero_prior_inverts(self):
        rng = np.random.default_rng(0)
        H = rng.standard_normal((4, 4))
        y = rng.standard_normal(4)
        _, u = gaussian_posterior(H, y, 3.7, np.zeros(4), np.zeros(4))
        assert np.allclose(u, np.linalg.solve(H, y), atol=1e-9)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_residual(self, seed):
        rng = np.random.default_rng(seed)
        H = rng.standard_normal((4, 4))
        lam = rng.uniform(0.01, 1, 4)
        nv = rng.uniform(0.1, 2)
        C, _ = gaussian_posterior(H, rng.standard_normal(4), nv, lam, np.zeros(4))
        A = H.T @ H / nv + np.diag(lam)
        assert np.max(np.abs(A @ C - np.eye(4))) < 1e-9

    def test_singular(self):
        H = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(DetectionError):
            gaussian_posterior(H, np.ones(2), 1.0, np.zeros(2), np.zeros(2))


class TestCavity:
    def test_zero_prior(self):
        m, eps2 = cavity(np.array([0.7]), np.array([0.4]), np.zeros(1), np.zeros(1))
        assert eps2[0] == 0.4 and m[0] == pytest.approx(0.7, rel=1e-15)

    def test_hand_example(self):
        m, eps2 = cavity(1.0, 0.5, 0.2, 0.0)
        assert eps2 == pytest.approx(0.5 / 0.9, rel=1e-15)
        assert m == pytest.approx(1.1111111111111112, rel=1e-15)

    def test_negative_variance_survives(self):
        _, eps2 = cavity(1.0, 0.5, 4.0, 0.0)
        assert eps2 == pytest.approx(-0.5, rel=1e-15)

    def test_guard_band(self):
        _, eps2 = cavity(1.0, 0.5, 2.0, 0.0)
        assert eps2 == pytest.approx(0.5 / 1e-12)
        _, eps2 = cavity(1.0, 0.5, 2.0 + 1e-14, 0.0)
        assert eps2 == pytest.approx(-0.5 / 1e-12)

    def test_zero_s(self):
        with pytest.raises(DetectionError):
            cavity(1.0, 0.0, 0.2, 0.0)


class TestMomentMatch:
    def test_symmetric(self):
        for v in (0.01, 1.0, 50.0):
            u, _ = moment_match(0.0, v, 1.0, C16)
            assert abs(u) < 1e-15

    def test_point_mass_limit(self):
        u, s = moment_match(0.9, 1e-9, 1.0, C16)
        assert u == 1.0 and s == 5e-7

    def test_enumeration_example(self):
        u, s = moment_match(0.9, 1.0, 1.0, C16)
        ru, rs = pmf_moments(0.9, 1.0, PAM16)
        assert u == pytest.approx(ru, abs=1e-12)
        assert s == pytest.approx(rs, abs=1e-12)

    def test_alpha_scales_variance(self):
        assert moment_match(0.3, 2.0, 0.5, C16) == moment_match(0.3, 1.0, 1.0, C16)

    def test_negative_variance_prefers_far_points(self):
        u, s = moment_match(1.5, -0.01, 1.0, C16)
        assert u == -3.0 and s == 5e-7

    def test_huge_exponent_no_overflow(self):
        u, s = moment_match(1e3, 1e-6, 1.0, C16)
        assert u == 3.0 and np.isfinite(s)

    @given(
        st.floats(-10, 10),
        st.one_of(st.floats(1e-4, 1e3), st.floats(-1e3, -1e-4)),
        st.sampled_from([4, 16, 64]),
    )
    @settings(max_examples=200)
    def test_properties_against_enumeration(self, m, v, order):
        pam = build_constellation(order).real_pam
        u, s = moment_match(m, v, 1.0, pam)
        lo, hi = pam[0], pam[-1]
        assert lo - 1e-12 <= u <= hi + 1e-12
        assert 5e-7 <= s <= (hi - lo) ** 2 / 4 + 5e-7 + 1e-12
        ru, rs = pmf_moments(m, v, pam)
        assert u == pytest.approx(ru, abs=1e-12)
        assert s == pytest.approx(max(rs, 5e-7), abs=1e-12)


class TestUpdates:
    def test_mepd_zero_step(self):
        assert mepd_update(0.2, 0.1, 1.0, 0.5, 0.8, 1.0, 0.0) == (0.2, 0.1)

    def test_mepd_fixed_point(self):
        assert mepd_update(0.2, 0.1, 0.8, 0.5, 0.8, 0.5, 0.7) == (0.2, 0.1)

    def test_mepd_hand_example(self):
        lam, gamma = mepd_update(0.2, 0.0, 1.0, 0.5, 0.8, 1.0, 0.3)
        assert lam == pytest.approx(0.5, rel=1e-15)
        assert gamma == pytest.approx(0.36, rel=1e-15)

    def test_epd_skip(self):
        lam, gamma = epd_update(0.2, 0.1, 1.0, 2.0, 0.8, 1.0)
        assert (lam, gamma) == (0.2, 0.1)

    def test_epd_hand_example(self):
        lam, gamma = epd_update(0.2, 0.0, 1.0, 0.5, 0.8, 1.0, 0.2)
        assert lam == pytest.approx(0.36, rel=1e-15)
        assert gamma == pytest.approx(0.24, rel=1e-15)


class TestEpDetectors:
    def test_one_iteration_is_lmmse(self):
        r = instance(1, 4, 6)
        a = detect_epd(r.H, r.y, r.noise_power, C16, iters=1)
        b = detect_lmmse(r.H, r.y, r.noise_power, C16)
        assert np.allclose(a, b, atol=1e-10)
        _, u = gaussian_posterior(r.H, r.y, r.noise_power, np.full(8, 0.2), np.zeros(8))
        assert np.allclose(b, u, atol=1e-10)

    def test_mepd_one_layer_is_lmmse(self):
        r = instance(2, 3, 3)
        p = MepdParams([7.0], [-3.0], 0.2)
        assert np.allclose(detect_mepd(r.H, r.y, r.noise_power, C16, p),
                           detect_lmmse(r.H, r.y, r.noise_power, C16), atol=1e-10)

    def test_lmmse_identity_flat_prior(self):
        y = np.array([0.3, -1.2])
        big = build_constellation(64)
        u = detect_lmmse(np.eye(2), y, 1e-12, big)
        assert np.allclose(u, y, atol=1e-9)

    @pytest.mark.parametrize("detector", ["epd", "mepd", "sic"])
    def test_noiseless_recovery(self, detector):
        r = instance(3, 4, 8, snr_db=120.0)
        fn = {"epd": lambda: detect_epd(r.H, r.y, r.noise_power, C16),
              "mepd": lambda: detect_mepd_default(r.H, r.y, r.noise_power, C16),
              "sic": lambda: detect_mmse_sic(r.H, r.y, r.noise_power, C16)}[detector]
        assert np.array_equal(hard_decision(fn(), C16)[0], r.x)

    @pytest.mark.parametrize("seed", range(5))
    def test_epd_matches_reference(self, seed):
        r = instance(seed, 2, 2, snr_db=12.0)
        trace = []
        u = detect_epd(r.H, r.y, r.noise_power, C16, iters=5, trace=trace)
        ref_u, hist = ep_reference(r.H, r.y, r.noise_power, PAM16, 0.2, [1.0] * 5, [0.2] * 5, "epd")
        assert np.allclose(u, ref_u, rtol=1e-9, atol=1e-9)
        for step, (lam, gamma) in zip(trace, hist):
            assert np.allclose(step.state.lam, lam, rtol=1e-9, atol=1e-12)
            assert np.allclose(step.state.gamma, gamma, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_mepd_matches_reference(self, seed):
        r = instance(seed, 2, 2, snr_db=12.0)
        p = MepdParams([1.1, 0.9], [0.3, 0.5], 0.1)
        u = detect_mepd(r.H, r.y, r.noise_power, C16, p)
        ref_u, _ = ep_reference(r.H, r.y, r.noise_power, PAM16, 0.1, [1.1, 0.9], [0.3, 0.5], "mepd")
        assert np.allclose(u, ref_u, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_mepd_point_is_mepd_transcription(self, seed):
        r = instance(seed, 4, 4, snr_db=14.0)
        trace = []
        u = detect_mepd(r.H, r.y, r.noise_power, C16, MepdParams.mepd_point(5, C16), trace=trace)
        ref_u, hist = ep_reference(r.H, r.y, r.noise_power, PAM16, 0.2, [1.0] * 5, [0.2] * 5, "mepd")
        assert np.allclose(u, ref_u, rtol=1e-9, atol=1e-9)
        assert len(trace) == 5
        for step, (lam, gamma) in zip(trace, hist):
            assert np.allclose(step.state.lam, lam, rtol=1e-9, atol=1e-12)

    def test_epd_skip_branch_in_trace(self):
        skipped = 0
        for seed in range(20):
            r = instance(seed, 4, 4, snr_db=10.0)
            trace = []
            detect_epd(r.H, r.y, r.noise_power, C16, iters=5, trace=trace)
            for a, b in zip(trace, trace[1:]):
                mask = a.sigma2_prime > a.cavity.eps2
                skipped += mask.sum()
                assert np.array_equal(a.state.lam[mask], b.state.lam[mask])
                assert np.array_equal(a.state.gamma[mask], b.state.gamma[mask])
        assert skipped > 0

    def test_batch_matches_single(self):
        rs = [instance(s, 3, 4) for s in range(6)]
        H = np.stack([r.H for r in rs])
        y = np.stack([r.y for r in rs])
        nv = rs[0].noise_power
        batch = detect_epd(H, y, nv, C16)
        for i, r in enumerate(rs):
            assert np.allclose(batch[i], detect_epd(r.H, r.y, nv, C16), atol=1e-12)

    def test_failed_trial_in_batch(self):
        H = np.stack([np.eye(2), np.zeros((2, 2))])
        y = np.ones((2, 2))
        p = MepdParams([1.0, 1.0], [0.2, 0.2], 1e-320)
        out = detect_mepd(H, y, 1.0, C4, p)
        assert np.all(np.isfinite(out[0])) and np.all(np.isnan(out[1]))
        with pytest.raises(DetectionError):
            detect_mepd(H[1], y[1], 1.0, C4, p)

    def test_trace_format(self):
        r = instance(0, 1, 1)
        trace = []
        detect_epd(r.H, r.y, r.noise_power, C16, iters=2, trace=trace)
        lines = format_trace(trace).splitlines()
        assert lines[0] == TRACE_HEADER
        assert len(lines) == 1 + 2 * 2
        assert lines[1].startswith("1,0,0.2,0.0,")
        assert all(len(ln.split(",")) == 10 for ln in lines)

    def test_trace_needs_single(self):
        with pytest.raises(ValueError):
            detect_epd(np.zeros((2, 2, 2)), np.zeros((2, 2)), 1.0, C16, trace=[])

    def test_bad_iters(self):
        with pytest.raises(ConfigurationError):
            detect_epd(np.eye(2), np.ones(2), 1.0, C16, iters=0)


class TestSic:
    def test_orthogonal_columns(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            H = np.array([[1.0, 1.0], [1.0, -1.0]]) * rng.uniform(0.5, 2, 2)
            y = rng.standard_normal(2) * 3
            nv = 0.4
            # per-stream scalar LMMSE with no interference
            scalar = (H.T @ y / nv) / (np.sum(H ** 2, axis=0) / nv + 0.2)
            expect = hard_decision(scalar, C16)[0]
            assert np.array_equal(detect_mmse_sic(H, y, nv, C16), expect)

    def test_beats_lmmse_qpsk(self):
        from mepd.harness import SimConfig, run_ser

        sic = run_ser(SimConfig(4, 4, 4, "mmse-sic", max_pairs=20_000, max_errors=10**9, seed=9), 12.0)
        lin = run_ser(SimConfig(4, 4, 4, "lmmse", max_pairs=20_000, max_errors=10**9, seed=9), 12.0)
        assert sic.interval()[1] < lin.interval()[0]


class TestMl:
    def test_hand_qpsk(self):
        H = np.array([[1.0, 0.5], [0.0, 1.0]])
        y = np.array([0.6, -0.9])
        # candidates and ||y - Hx||^2 by hand:
        # (-1,-1): (2.1, 0.1) -> 4.42   (-1, 1): (1.1, -1.9) -> 4.82
        # ( 1,-1): (0.1, 0.1) -> 0.02   ( 1, 1): (-0.9,-1.9) -> 4.42
        assert detect_ml(H, y, C4).tolist() == [1.0, -1.0]

    def test_tie_lexicographic(self):
        # x and -x are equidistant from y = 0
        out = detect_ml(np.eye(2), np.zeros(2), C4)
        assert out.tolist() == [-1.0, -1.0]

    def test_candidates_order(self):
        X = ml_candidates(C4, 2)
        assert X.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]

    def test_budget(self):
        with pytest.raises(ConfigurationError):
            ml_candidates(C16, 16)

    def test_noiseless(self):
        for seed in range(10):
            r = instance(seed, 2, 2, snr_db=200.0)
            assert symbol_errors(detect_ml(r.H, r.y, C16), r.x) == 0


class TestParams:
    def test_roundtrip_vector(self):
        p = MepdParams([1.1, 0.9, 1.0], [0.3, 0.5, 0.2], 0.1)
        assert MepdParams.from_vector(p.to_vector(), 3) == p

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            MepdParams([1.0], [0.2, 0.3], 0.1)
        with pytest.raises(ConfigurationError):
            MepdParams([1.0], [0.2], 0.0)

    def test_readonly(self):
        p = MepdParams.mepd_point(2, C16)
        with pytest.raises(ValueError):
            p.alpha[0] = 3.0
        assert p.lambda_init == 0.2
