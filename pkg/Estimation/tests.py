import math

import numpy as np
from django.test import SimpleTestCase, tag
from hypothesis import given, settings, strategies as st

from Fading.utils import (
    AutocorrelationSequence,
    BuildCovariance,
    ChannelCovariance,
    CirculantColumn,
    ComplexGaussian,
    DopplerSpectrum,
    SynthesizeRealization,
)
from Pilots.utils import FftPilot, HadamardPilots

from .utils import (
    AsymptoticMse,
    CirculantMse,
    ClarkeAlpha,
    ClarkeClosedForm,
    ErrorCovariance,
    EstimateReport,
    EstimationError,
    FiniteMse,
    MmseEstimate,
    MmseEstimates,
    NoProcessingGain,
    ProcessingGain,
    ProcessingGainFromMse,
    SceneUser,
    SmallAlphaMse,
    TaylorCheck,
    UplinkScene,
)


def ConstantCovariance(P):
    r = AutocorrelationSequence(values=np.ones(P, dtype=complex), spectrum=None)
    eigenvalues = np.clip(np.fft.fft(CirculantColumn(r)).real, 0.0, None)
    return ChannelCovariance(P=P, autocorrelation=r, eigenvalues=eigenvalues)


def ClarkeScene(F, P, shifts, power=1.0, noise=1.0):
    cov = BuildCovariance(DopplerSpectrum.clarke(F), P)
    users = tuple(SceneUser(pilot=FftPilot(tau, P=P), covariance=cov, power=power) for tau in shifts)
    return UplinkScene(users=users, noise=noise)


def Observe(scene, channels, rng, M):
    y = math.sqrt(scene.noise) * ComplexGaussian(rng, (scene.P, M))
    for user, h in zip(scene.users, channels):
        y += math.sqrt(user.power) * user.pilot.values[:, None] * h
    return y


class SceneTests(SimpleTestCase):
    def test_mismatched_lengths_rejected(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 16)
        with self.assertRaises(ValueError):
            UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=8), covariance=cov),))

    def test_negative_power_rejected(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 8)
        with self.assertRaises(ValueError):
            UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=8), covariance=cov, power=-1.0),))
        with self.assertRaises(ValueError):
            UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=8), covariance=cov),), noise=-0.1)

    def test_singular_system_raises(self):
        scene = UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=8), covariance=ConstantCovariance(8)),), noise=0.0)
        with self.assertRaises(EstimationError):
            FiniteMse(scene, 0)


class MmseEstimateTests(SimpleTestCase):
    def test_noise_free_full_band_recovers_channel(self):
        P = 32
        cov = BuildCovariance(DopplerSpectrum.flat_band(-0.5, 0.5), P)
        scene = UplinkScene(users=(SceneUser(pilot=FftPilot(5, P=P), covariance=cov, power=2.0),), noise=0.0)
        h = SynthesizeRealization(cov, 3, seed=1).samples
        y = math.sqrt(2.0) * scene.users[0].pilot.values[:, None] * h
        np.testing.assert_allclose(MmseEstimate(y, scene, 0), h, atol=1e-8)

    def test_silent_user_estimate_is_zero(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.02), 16)
        scene = UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=16), covariance=cov, power=0.0),))
        y = ComplexGaussian(np.random.default_rng(0), (16, 4))
        np.testing.assert_array_equal(MmseEstimate(y, scene, 0), np.zeros((16, 4)))
        E, mse = ErrorCovariance(scene, 0)
        np.testing.assert_allclose(E, cov.toeplitz)
        self.assertAlmostEqual(mse, 1.0)
        self.assertAlmostEqual(FiniteMse(scene, 0), 1.0)

    def test_shared_solve_matches_single_estimates(self):
        scene = ClarkeScene(0.01, 64, (0, 20, 40))
        y = ComplexGaussian(np.random.default_rng(2), (64, 5))
        together = MmseEstimates(y, scene)
        for k in range(3):
            np.testing.assert_allclose(together[k], MmseEstimate(y, scene, k), atol=1e-10)

    def test_vector_observation(self):
        scene = ClarkeScene(0.01, 32, (0,))
        y = ComplexGaussian(np.random.default_rng(3), (32,))
        self.assertEqual(MmseEstimate(y, scene, 0).shape, (32,))
        with self.assertRaises(ValueError):
            MmseEstimate(np.ones(31), scene, 0)

    def test_orthogonality_principle(self):
        P, M = 16, 2000
        scene = ClarkeScene(0.05, P, (0, 8))
        rng = np.random.default_rng(7)
        cov = scene.users[0].covariance
        channels = [SynthesizeRealization(cov, M, rng, method="toeplitz").samples for _ in scene.users]
        y = Observe(scene, channels, rng, M)
        error = MmseEstimate(y, scene, 0) - channels[0]
        products = error[:, None, :] * np.conj(y)[None, :, :]
        mean = products.mean(axis=2)
        standardError = products.std(axis=2, ddof=1) / math.sqrt(M)
        scores = np.concatenate([
            (np.abs(mean.real) / (standardError / math.sqrt(2))).ravel(),
            (np.abs(mean.imag) / (standardError / math.sqrt(2))).ravel(),
        ])
        self.assertLess(scores.max(), 5.0)

    def test_empirical_mse_matches_matrix_formula(self):
        P, M = 1024, 500
        scene = ClarkeScene(0.002, P, (0, P // 2))
        rng = np.random.default_rng(11)
        cov = scene.users[0].covariance
        channels = [SynthesizeRealization(cov, M, rng, method="toeplitz").samples for _ in scene.users]
        y = Observe(scene, channels, rng, M)
        error = MmseEstimates(y, scene)[0] - channels[0]
        perDraw = np.sum(np.abs(error) ** 2, axis=0) / P
        standardError = perDraw.std(ddof=1) / math.sqrt(M)
        self.assertLess(abs(perDraw.mean() - FiniteMse(scene, 0)), 4 * standardError)
        # the half-circle partner leaves user 0 as if alone
        alone = FiniteMse(scene.alone(0), 0)
        self.assertAlmostEqual(FiniteMse(scene, 0), alone, delta=0.02 * alone)


class FiniteMseTests(SimpleTestCase):
    def test_trace_matches_error_covariance(self):
        scene = ClarkeScene(0.02, 64, (0, 10), power=3.0)
        _, mse = ErrorCovariance(scene, 1)
        self.assertAlmostEqual(FiniteMse(scene, 1), mse, places=9)

    def test_hadamard_pair_on_constant_channels(self):
        cov = ConstantCovariance(8)
        a, b = HadamardPilots(8)[:2]
        scene = UplinkScene(users=(SceneUser(pilot=a, covariance=cov), SceneUser(pilot=b, covariance=cov)))
        _, together = ErrorCovariance(scene, 1)
        _, alone = ErrorCovariance(scene.alone(1), 0)
        self.assertAlmostEqual(together, alone, places=10)

    @given(
        st.floats(min_value=0.005, max_value=0.2),
        st.floats(min_value=0.1, max_value=10.0),
        st.floats(min_value=1.1, max_value=10.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_power_and_noise(self, F, power, factor):
        cov = BuildCovariance(DopplerSpectrum.clarke(F), 32)

        def Mse(power, noise):
            scene = UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=32), covariance=cov, power=power),), noise=noise)
            return FiniteMse(scene, 0)

        self.assertLessEqual(Mse(power * factor, 1.0), Mse(power, 1.0) + 1e-12)
        self.assertGreaterEqual(Mse(power, factor), Mse(power, 1.0) - 1e-12)

    @given(
        st.floats(min_value=0.005, max_value=0.2),
        st.floats(min_value=0.0, max_value=31.0),
        st.floats(min_value=0.0, max_value=10.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_interference_never_helps(self, F, shift, power):
        cov = BuildCovariance(DopplerSpectrum.clarke(F), 32)
        user = SceneUser(pilot=FftPilot(0, P=32), covariance=cov)
        interferer = SceneUser(pilot=FftPilot(shift, P=32), covariance=cov, power=power)
        clean = FiniteMse(UplinkScene(users=(user,)), 0)
        contaminated = FiniteMse(UplinkScene(users=(user,), interferers=(interferer,)), 0)
        self.assertGreaterEqual(contaminated, clean - 1e-12)

    def test_finite_p_approaches_asymptote(self):
        F = 0.002
        limit = AsymptoticMse(DopplerSpectrum.clarke(F), [], 1.0, 1.0)
        values = [FiniteMse(ClarkeScene(F, P, (0,)), 0) for P in (512, 1024, 2048)]
        self.assertTrue(all(later < earlier for earlier, later in zip(values, values[1:])))
        self.assertTrue(all(value > limit for value in values))
        self.assertLess(values[-1] - limit, (values[0] - limit) / 2)

    def test_circulant_sum_without_interference(self):
        cov = BuildCovariance(DopplerSpectrum.flat_band(-0.5, 0.5), 64)
        self.assertAlmostEqual(CirculantMse(cov.eigenvalues, 1.0, 1.0), 0.5)
        self.assertAlmostEqual(CirculantMse(cov.eigenvalues, 0.0, 1.0), 1.0)
        loaded = CirculantMse(cov.eigenvalues, 1.0, 1.0, interferers=((cov.eigenvalues, 3, 1.0),))
        self.assertAlmostEqual(loaded, 1.0 - 1.0 / 3.0)


class AsymptoticMseTests(SimpleTestCase):
    def test_flat_band(self):
        spectrum = DopplerSpectrum.flat_band(-0.002, 0.002)
        self.assertAlmostEqual(AsymptoticMse(spectrum, [], 1.0, 1.0), 1.0 / 251.0, delta=1e-10)

    def test_noise_free_clarke(self):
        self.assertAlmostEqual(AsymptoticMse(DopplerSpectrum.clarke(0.002), [], 1.0, 0.0), 0.0, delta=1e-9)

    def test_silent_user(self):
        self.assertEqual(AsymptoticMse(DopplerSpectrum.clarke(0.002), [], 0.0, 1.0), 1.0)

    def test_matches_closed_form(self):
        F = 0.002
        for alpha in (0.05, 0.2, 1.0, 5.0):
            quadrature = AsymptoticMse(DopplerSpectrum.clarke(F), [], math.pi * F / alpha, 1.0)
            self.assertAlmostEqual(quadrature, ClarkeClosedForm(alpha), delta=1e-6)

    def test_disjoint_interferer_has_no_effect(self):
        spectrum = DopplerSpectrum.clarke(0.002)
        clean = AsymptoticMse(spectrum, [], 1.0, 1.0)
        shifted = AsymptoticMse(spectrum, [(spectrum, 0.5, 1.0), (spectrum, 3 / 8 + 1 / 36, 1.0)], 1.0, 1.0)
        self.assertAlmostEqual(shifted, clean, delta=1e-12)

    def test_overlapping_interferer_raises_mse(self):
        spectrum = DopplerSpectrum.clarke(0.002)
        clean = AsymptoticMse(spectrum, [], 1.0, 1.0)
        partial = AsymptoticMse(spectrum, [(spectrum, 0.001, 1.0)], 1.0, 1.0)
        full = AsymptoticMse(spectrum, [(DopplerSpectrum.flat_band(-0.375, 0.375), 0.0, 1.0)], 1.0, 1.0)
        self.assertGreater(partial, clean)
        self.assertGreater(full, clean)

    def test_flat_contamination_over_flat_user(self):
        user = DopplerSpectrum.flat_band(-0.002, 0.002)
        contamination = DopplerSpectrum.flat_band(-0.375, 0.375)
        # S = 250 against interference 4/3 plus unit noise
        expected = 0.004 * 250 * (1 + 4 / 3) / (250 + 1 + 4 / 3)
        self.assertAlmostEqual(AsymptoticMse(user, [(contamination, 0.0, 1.0)], 1.0, 1.0), expected, delta=1e-9)


class ClosedFormTests(SimpleTestCase):
    def test_boundary(self):
        self.assertAlmostEqual(ClarkeClosedForm(1.0), 1.0 - 2.0 / math.pi, delta=1e-12)
        self.assertAlmostEqual(ClarkeClosedForm(1.0 - 1e-6), 1.0 - 2.0 / math.pi, delta=1e-4)
        self.assertAlmostEqual(ClarkeClosedForm(1.0 + 1e-6), 1.0 - 2.0 / math.pi, delta=1e-4)

    def test_limits(self):
        self.assertLess(ClarkeClosedForm(1e-8), 1e-7)
        self.assertGreater(ClarkeClosedForm(1e6), 0.99)
        with self.assertRaises(ValueError):
            ClarkeClosedForm(0.0)

    @given(st.floats(min_value=1e-4, max_value=100.0))
    @settings(max_examples=100, deadline=None)
    def test_bounded_and_increasing(self, alpha):
        value = ClarkeClosedForm(alpha)
        self.assertTrue(0.0 < value < 1.0)
        self.assertLessEqual(value, ClarkeClosedForm(alpha * 1.01) + 1e-12)

    def test_taylor_residual(self):
        for alpha, limit in ((0.1, 0.2), (0.01, 0.02)):
            exact, series = TaylorCheck(alpha)
            self.assertLessEqual(abs(exact - series) / alpha ** 3, limit)
        exact, _ = TaylorCheck(1e-6)
        self.assertAlmostEqual(exact / (2e-6 / math.pi), 1.0, delta=1e-5)
        with self.assertRaises(ValueError):
            TaylorCheck(1.0)


class SmallAlphaTests(SimpleTestCase):
    def test_values(self):
        self.assertAlmostEqual(SmallAlphaMse(0.002, 1.0), 0.004)
        self.assertAlmostEqual(SmallAlphaMse(0.011, 1.0), 0.022)
        closed = ClarkeClosedForm(ClarkeAlpha(0.002, 1.0))
        self.assertLess(abs(closed - 0.004) / 0.004, 0.01)

    def test_processing_gain(self):
        self.assertAlmostEqual(ProcessingGain(0.002, 1.0), 10 * math.log10(249), delta=1e-9)
        self.assertAlmostEqual(ProcessingGainFromMse(SmallAlphaMse(0.002, 1.0), 1.0), ProcessingGain(0.002, 1.0), delta=1e-9)
        self.assertEqual(ProcessingGainFromMse(0.0, 1.0), math.inf)

    def test_no_processing_gain(self):
        with self.assertRaises(NoProcessingGain):
            ProcessingGain(0.25, 0.5)
        with self.assertRaises(NoProcessingGain):
            ProcessingGainFromMse(1.0, 1.0)


class ReportTests(SimpleTestCase):
    def test_aligned_pair_report(self):
        scene = ClarkeScene(0.002, 256, (0, 128))
        report = EstimateReport(scene, 0)
        self.assertAlmostEqual(report.asymptotic_mse, report.closed_form_mse, delta=1e-6)
        self.assertAlmostEqual(report.small_alpha_mse, 0.004)
        self.assertAlmostEqual(report.processing_gain_db, 10 * math.log10(249), delta=1e-9)
        self.assertGreaterEqual(report.finite_mse, report.interference_free_mse - 1e-12)
        self.assertIsNone(report.as_dict()["empirical_nmse"])

    def test_hadamard_scene_skips_asymptotic(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 16)
        users = tuple(SceneUser(pilot=pilot, covariance=cov) for pilot in HadamardPilots(16)[:2])
        report = EstimateReport(UplinkScene(users=users), 1)
        self.assertIsNone(report.asymptotic_mse)
        self.assertIsNotNone(report.closed_form_mse)


@tag("slow")
class ConvergenceTests(SimpleTestCase):
    def test_gap_shrinks_up_to_4096(self):
        F = 0.002
        limit = AsymptoticMse(DopplerSpectrum.clarke(F), [], 1.0, 1.0)
        gaps = [(FiniteMse(ClarkeScene(F, P, (0,)), 0) - limit) / limit for P in (512, 1024, 2048, 4096)]
        self.assertTrue(all(later < earlier for earlier, later in zip(gaps, gaps[1:])))
        self.assertGreater(gaps[-1], 0.0)
