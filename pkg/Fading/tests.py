import math

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from .utils import (
    AutocorrelationSequence,
    BuildCovariance,
    ChannelCovariance,
    CirculantColumn,
    ClarkeAutocorrelation,
    ClarkePsd,
    DopplerFromSpeed,
    DopplerSpectrum,
    FlatPsd,
    IntegratePsd,
    NormalizedDoppler,
    SampleAutocorrelation,
    SamplingFrequency,
    SpectrumError,
    SpectrumSamples,
    SynthesizeRealization,
    WrapFrequency,
)


def BesselSeries(x, terms=50):
    # independent J0 oracle: sum_k (-1)^k (x/2)^(2k) / (k!)^2
    total, term = 0.0, 1.0
    quarter = (x / 2.0) ** 2
    for k in range(terms):
        if k:
            term *= -quarter / (k * k)
        total += term
    return total


def ConstantCovariance(P):
    r = AutocorrelationSequence(values=np.ones(P, dtype=complex), spectrum=None)
    eigenvalues = np.clip(np.fft.fft(CirculantColumn(r)).real, 0.0, None)
    return ChannelCovariance(P=P, autocorrelation=r, eigenvalues=eigenvalues)


class NumerologyTests(SimpleTestCase):
    def test_sampling_frequency_from_symbol_duration(self):
        self.assertAlmostEqual(SamplingFrequency(66.67e-6), 5000.0, delta=0.5)

    def test_normalized_doppler_lte_example(self):
        self.assertAlmostEqual(NormalizedDoppler(55.0, 5000.0), 0.011, places=12)
        self.assertEqual(ClarkeAutocorrelation(NormalizedDoppler(55.0, 5000.0), 0), 1.0)

    def test_doppler_from_speed(self):
        self.assertAlmostEqual(DopplerFromSpeed(30.0, 2e9), 55.6, delta=0.1)

    def test_normalized_doppler_above_half_rejected(self):
        with self.assertRaises(SpectrumError):
            NormalizedDoppler(3000.0, 5000.0)

    def test_wrap_frequency(self):
        self.assertEqual(WrapFrequency(0.75), -0.25)
        self.assertEqual(WrapFrequency(-0.5), 0.5)
        self.assertEqual(WrapFrequency(0.5), 0.5)


class ClarkeTests(SimpleTestCase):
    def test_autocorrelation_at_zero_lag(self):
        self.assertEqual(ClarkeAutocorrelation(0.002, 0), 1.0)

    def test_autocorrelation_matches_series_oracle(self):
        self.assertAlmostEqual(ClarkeAutocorrelation(0.002, 100), BesselSeries(0.4 * math.pi), delta=1e-12)

    def test_autocorrelation_is_even(self):
        self.assertEqual(ClarkeAutocorrelation(0.01, 37), ClarkeAutocorrelation(0.01, -37))

    @given(st.floats(min_value=-8.0, max_value=8.0, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_bessel_matches_power_series(self, x):
        # J0(x) = r(v) with 2 pi F v = x
        F, v = 0.5, x / math.pi
        self.assertAlmostEqual(ClarkeAutocorrelation(F, v), BesselSeries(x), delta=1e-12)

    def test_invalid_doppler_rejected(self):
        for F in (0.0, -0.1, 0.6):
            with self.assertRaises(SpectrumError):
                ClarkeAutocorrelation(F, 1)

    def test_psd_values(self):
        self.assertEqual(ClarkePsd(0.002, 0.01), 0.0)
        self.assertAlmostEqual(ClarkePsd(0.002, 0.0), 159.1549, places=4)
        self.assertEqual(ClarkePsd(0.002, 0.002), math.inf)

    def test_psd_outside_circle_rejected(self):
        with self.assertRaises(SpectrumError):
            ClarkePsd(0.002, 0.7)

    def test_psd_integrates_to_power(self):
        self.assertAlmostEqual(IntegratePsd(DopplerSpectrum.clarke(0.002)), 1.0, delta=1e-3)
        self.assertAlmostEqual(IntegratePsd(DopplerSpectrum.clarke(0.2, power=2.0)), 2.0, delta=1e-3)


class FlatBandTests(SimpleTestCase):
    def test_psd_values(self):
        band = (-0.375, 0.375)
        self.assertAlmostEqual(FlatPsd(band, 1.0, 0.0), 4.0 / 3.0)
        self.assertEqual(FlatPsd(band, 1.0, 0.4), 0.0)
        self.assertEqual(FlatPsd(band, 0.0, 0.1), 0.0)

    def test_inverted_band_rejected(self):
        with self.assertRaises(SpectrumError):
            FlatPsd((0.2, 0.1), 1.0, 0.0)
        with self.assertRaises(SpectrumError):
            DopplerSpectrum.flat_band(0.1, 0.1)

    def test_integrates_to_power(self):
        self.assertAlmostEqual(IntegratePsd(DopplerSpectrum.flat_band(-0.375, 0.375)), 1.0, delta=1e-6)

    def test_autocorrelation_matches_inverse_transform(self):
        spectrum = DopplerSpectrum.flat_band(0.1, 0.3, power=2.0)
        r = BuildCovariance(spectrum, 16).autocorrelation
        xi = np.linspace(0.1, 0.3, 20001)
        for v in (1, 5, 9):
            integrand = spectrum.density(xi) * np.exp(2j * np.pi * xi * v)
            expected = np.trapz(integrand, xi)
            self.assertAlmostEqual(abs(r.values[v] - expected), 0.0, delta=1e-6)

    def test_full_band_is_white(self):
        cov = BuildCovariance(DopplerSpectrum.flat_band(-0.5, 0.5), 64)
        np.testing.assert_allclose(cov.autocorrelation.values[1:], 0.0, atol=1e-15)
        np.testing.assert_allclose(cov.eigenvalues, 1.0, atol=1e-12)


class SampledSpectrumTests(SimpleTestCase):
    def test_normalized_to_power(self):
        spectrum = DopplerSpectrum.sampled([4.0, 2.0, 0.0, 2.0], power=1.5)
        self.assertAlmostEqual(spectrum.samples.mean(), 1.5)
        self.assertAlmostEqual(spectrum.cdf(0.5) - spectrum.cdf(-0.5), 1.5)
        self.assertAlmostEqual(BuildCovariance(spectrum, 8).r0, 1.5)

    def test_negative_values_rejected(self):
        with self.assertRaises(SpectrumError):
            DopplerSpectrum.sampled([1.0, -1.0, 1.0])


class CovarianceTests(SimpleTestCase):
    def test_circulant_trace(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.002), 1024)
        self.assertEqual(np.trace(cov.circulant).real / 1024, 1.0)
        self.assertAlmostEqual(cov.eigenvalues.sum() / 1024, 1.0, places=10)

    def test_toeplitz_is_hermitian_with_unit_trace(self):
        cov = BuildCovariance(DopplerSpectrum.flat_band(0.05, 0.2), 32)
        R = cov.toeplitz
        np.testing.assert_allclose(R, R.conj().T)
        self.assertAlmostEqual(np.trace(R).real / 32, 1.0)

    def test_constant_channel_circulant(self):
        cov = ConstantCovariance(16)
        np.testing.assert_allclose(cov.circulant, np.ones((16, 16)))
        expected = np.zeros(16)
        expected[0] = 16
        np.testing.assert_allclose(cov.eigenvalues, expected, atol=1e-12)

    def test_eigenvalues_follow_bin_averaged_psd(self):
        F, P = 0.05, 4096
        cov = BuildCovariance(DopplerSpectrum.clarke(F), P)
        samples = SpectrumSamples(cov.spectrum, P)
        frequencies = WrapFrequency(np.arange(P) / P)
        interior = np.abs(frequencies) < F - 1.0 / P
        np.testing.assert_allclose(cov.eigenvalues[interior], samples[interior], rtol=0.05)

    def test_spectrum_samples_vanish_outside_support(self):
        F, P = 0.002, 1000
        samples = SpectrumSamples(DopplerSpectrum.clarke(F), P)
        frequencies = WrapFrequency(np.arange(P) / P)
        self.assertTrue(np.all(samples[np.abs(frequencies) > F + 1.0 / P] == 0))
        self.assertAlmostEqual(samples.sum() / P, 1.0, places=12)

    def test_clamp_stays_quiet_for_clarke(self):
        with self.assertNoLogs("Fading.utils", level="WARNING"):
            cov = BuildCovariance(DopplerSpectrum.clarke(0.011), 2048)
        self.assertTrue(np.all(cov.eigenvalues >= 0))

    @given(st.floats(min_value=1e-3, max_value=0.5), st.integers(min_value=2, max_value=300))
    @settings(max_examples=50, deadline=None)
    def test_autocorrelation_bounded_by_power(self, F, P):
        r = BuildCovariance(DopplerSpectrum.clarke(F), P).autocorrelation
        self.assertEqual(r.values[0], 1.0)
        self.assertTrue(np.all(np.abs(r.values) <= 1.0 + 1e-12))
        self.assertEqual(r.at(-1), np.conj(r.at(1)))

    def test_small_length_rejected(self):
        with self.assertRaises(SpectrumError):
            BuildCovariance(DopplerSpectrum.clarke(0.1), 1)

    def test_leading_block_reuses_factor_rows(self):
        timeline = BuildCovariance(DopplerSpectrum.clarke(0.02), 65)
        timeline.factor
        lead = timeline.leading(64)
        np.testing.assert_allclose(lead.factor @ lead.factor.conj().T, lead.toeplitz, atol=1e-9)


class SynthesisTests(SimpleTestCase):
    def test_zero_eigenvalues_give_zero_realization(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.1), 16)
        silent = ChannelCovariance(P=16, autocorrelation=cov.autocorrelation, eigenvalues=np.zeros(16))
        realization = SynthesizeRealization(silent, 1, seed=3)
        np.testing.assert_array_equal(realization.samples, np.zeros((16, 1)))

    def test_constant_channel_columns_are_constant(self):
        realization = SynthesizeRealization(ConstantCovariance(32), 4, seed=11)
        for column in realization.samples.T:
            np.testing.assert_allclose(column, column[0], atol=1e-6)

    def test_deterministic_given_seed(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 128)
        first = SynthesizeRealization(cov, 3, seed=42).samples
        second = SynthesizeRealization(cov, 3, seed=42).samples
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, SynthesizeRealization(cov, 3, seed=43).samples))

    def test_unknown_method_rejected(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 8)
        with self.assertRaises(SpectrumError):
            SynthesizeRealization(cov, 1, seed=0, method="sum-of-sinusoids")

    def test_full_band_samples_are_white(self):
        P, M = 2048, 8
        realization = SynthesizeRealization(BuildCovariance(DopplerSpectrum.flat_band(-0.5, 0.5), P), M, seed=5)
        r = SampleAutocorrelation(realization, 20)
        self.assertTrue(np.all(np.abs(r[1:]) < 4.0 / math.sqrt(P * M)))

    def _Spread(self, cov, method, seeds, M):
        estimates = np.array([
            SampleAutocorrelation(SynthesizeRealization(cov, M, seed, method=method), 10).real for seed in seeds
        ])
        return estimates.mean(axis=0), estimates.std(axis=0, ddof=1) / math.sqrt(len(seeds))

    def test_toeplitz_synthesis_matches_bessel(self):
        F = 0.002
        cov = BuildCovariance(DopplerSpectrum.clarke(F), 1024)
        mean, standardError = self._Spread(cov, "toeplitz", range(100), 32)
        target = ClarkeAutocorrelation(F, np.arange(11))
        self.assertTrue(np.all(np.abs(mean - target) < 3 * standardError))

    def test_circulant_synthesis_matches_its_column(self):
        F, P = 0.002, 1024
        cov = BuildCovariance(DopplerSpectrum.clarke(F), P)
        mean, standardError = self._Spread(cov, "circulant", range(100), 32)
        self.assertTrue(np.all(np.abs(mean - cov.first_column[:11].real) < 3 * standardError))
        # the circulant column departs from J0 by at most the wrap weight v/P
        lags = np.arange(11)
        bias = np.abs(cov.first_column[:11].real - ClarkeAutocorrelation(F, lags))
        self.assertTrue(np.all(bias <= 2 * lags / P + 1e-12))
