"""
Doppler spectra, autocorrelations, channel covariances and stationary fading
realizations.

Frequencies are normalized to the channel sampling rate and live on the circle
(-1/2, 1/2]. Autocorrelations follow r(v) = E[h(n+v) h(n)*], so that
S(xi) = sum_v r(v) exp(-j 2 pi xi v) and R(l, l') = r(l - l').
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy import integrate, special

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0

CLARKE = "clarke"
FLAT_BAND = "flat"
SAMPLED = "sampled"

# Relative eigenvalue floor below which the Toeplitz factor drops a direction.
FACTOR_FLOOR = 1e-12


class SpectrumError(ValueError):
    pass


def WrapFrequency(xi):
    # Maps any real frequency onto (-1/2, 1/2].
    wrapped = np.asarray(xi, dtype=float) - np.floor(np.asarray(xi, dtype=float) + 0.5)
    wrapped = np.where(wrapped == -0.5, 0.5, wrapped)
    return wrapped if np.ndim(wrapped) else float(wrapped)


def _CheckFrequency(xi):
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= -0.5) or np.any(xi > 0.5):
        raise SpectrumError("normalized frequency must lie in (-1/2, 1/2]")
    return xi


def _CheckDoppler(F):
    if not (0.0 < F <= 0.5):
        raise SpectrumError(f"normalized Doppler must satisfy 0 < F <= 1/2, got {F}")


def SamplingFrequency(symbolDuration):
    """Channel sampling frequency f_s = 1/(3 T_s) used with OFDM symbols of length T_s."""
    if symbolDuration <= 0:
        raise SpectrumError("symbol duration must be positive")
    return 1.0 / (3.0 * symbolDuration)


def NormalizedDoppler(dopplerHz, samplingHz):
    F = dopplerHz / samplingHz
    _CheckDoppler(F)
    return F


def DopplerFromSpeed(speedKmh, carrierHz):
    """Maximum Doppler shift v f_c / c of a terminal moving at speedKmh."""
    return (speedKmh / 3.6) * carrierHz / SPEED_OF_LIGHT


def ClarkeAutocorrelation(F, v):
    """r(v) = J0(2 pi F v), real and even in the lag v."""
    _CheckDoppler(F)
    result = special.j0(2.0 * np.pi * F * np.asarray(v, dtype=float))
    return result if np.ndim(result) else float(result)


def ClarkePsd(F, xi):
    """
    Clarke (Jakes) bathtub spectrum of the sampled channel process.

    Returns (1/pi) / sqrt(F^2 - xi^2) inside the band, 0 outside and +inf on
    the band edges |xi| = F where the density is singular.
    """
    _CheckDoppler(F)
    xi = _CheckFrequency(xi)
    gap = F * F - xi * xi
    with np.errstate(divide="ignore", invalid="ignore"):
        density = np.where(gap > 0, 1.0 / (np.pi * np.sqrt(np.where(gap > 0, gap, 1.0))), 0.0)
    density = np.where(np.isclose(np.abs(xi), F, rtol=0.0, atol=1e-15), np.inf, density)
    return density if np.ndim(density) else float(density)


def _CheckBand(lo, hi):
    if not (-0.5 <= lo < hi <= 0.5):
        raise SpectrumError(f"band must satisfy -1/2 <= lo < hi <= 1/2, got [{lo}, {hi}]")


def FlatPsd(band, power, xi):
    lo, hi = band
    _CheckBand(lo, hi)
    if power < 0:
        raise SpectrumError("power must be nonnegative")
    xi = _CheckFrequency(xi)
    density = np.where((xi >= lo) & (xi <= hi), power / (hi - lo), 0.0)
    return density if np.ndim(density) else float(density)


@dataclass(frozen=True, eq=False)
class DopplerSpectrum:
    """
    Normalized Doppler power spectral density of one user or interferer.

    Build it with DopplerSpectrum.clarke(F), DopplerSpectrum.flat_band(lo, hi)
    or DopplerSpectrum.sampled(values); `power` is the total process power
    (the integral of the density over the circle).
    """
    kind: str
    F: float = None
    band: tuple = None
    samples: np.ndarray = None
    power: float = 1.0

    @classmethod
    def clarke(cls, F, power=1.0):
        _CheckDoppler(F)
        if power < 0:
            raise SpectrumError("power must be nonnegative")
        return cls(kind=CLARKE, F=float(F), power=float(power))

    @classmethod
    def flat_band(cls, lo, hi, power=1.0):
        _CheckBand(lo, hi)
        if power < 0:
            raise SpectrumError("power must be nonnegative")
        return cls(kind=FLAT_BAND, band=(float(lo), float(hi)), power=float(power))

    @classmethod
    def sampled(cls, values, power=1.0):
        # values sit on the uniform grid i/N in FFT order
        values = np.asarray(values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise SpectrumError("sampled spectrum needs at least two grid values")
        if np.any(values < 0):
            raise SpectrumError("spectral density must be nonnegative")
        if values.sum() <= 0 and power > 0:
            raise SpectrumError("sampled spectrum carries no energy")
        scale = power / values.mean() if values.sum() > 0 else 0.0
        density = values * scale
        density.setflags(write=False)
        return cls(kind=SAMPLED, samples=density, power=float(power))

    def density(self, xi):
        """S(xi) for any real frequency (wrapped onto the circle first)."""
        xi = WrapFrequency(xi)
        if self.kind == CLARKE:
            return self.power * ClarkePsd(self.F, xi)
        if self.kind == FLAT_BAND:
            return FlatPsd(self.band, self.power, xi)
        N = self.samples.size
        index = np.mod(np.rint(np.asarray(xi) * N).astype(int), N)
        result = self.samples[index]
        return result if np.ndim(result) else float(result)

    def support(self):
        """Closed frequency intervals outside of which S vanishes (unwrapped)."""
        if self.kind == CLARKE:
            return [(-self.F, self.F)]
        if self.kind == FLAT_BAND:
            return [self.band]
        return [(-0.5, 0.5)]

    def cdf(self, x):
        """Spectral mass on (-1/2, x], extended periodically to the real line."""
        x = np.asarray(x, dtype=float)
        turns = np.floor(x + 0.5)
        local = x - turns
        if self.kind == CLARKE:
            ratio = np.clip(local / self.F, -1.0, 1.0)
            mass = self.power * (0.5 + np.arcsin(ratio) / np.pi)
        elif self.kind == FLAT_BAND:
            lo, hi = self.band
            mass = self.power * np.clip((local - lo) / (hi - lo), 0.0, 1.0)
        else:
            N = self.samples.size
            ordered = np.fft.fftshift(self.samples)
            edges = (np.arange(N + 1) - N // 2 - 0.5) / N
            cumulative = np.concatenate(([0.0], np.cumsum(ordered) / N))

            def ramp(y):
                # mass from the lowest bin edge, continued periodically past the top edge
                y = np.asarray(y, dtype=float)
                return np.where(
                    y > edges[-1],
                    cumulative[-1] + np.interp(y - 1.0, edges, cumulative),
                    np.interp(y, edges, cumulative),
                )

            mass = ramp(local) - ramp(-0.5)
        result = turns * self.power + mass
        return result if np.ndim(result) else float(result)


@dataclass(frozen=True, eq=False)
class AutocorrelationSequence:
    values: np.ndarray
    spectrum: DopplerSpectrum

    def __len__(self):
        return self.values.size

    def at(self, v):
        """r(v) for positive or negative lags using r(-v) = r(v)*."""
        v = np.asarray(v)
        result = np.where(v >= 0, self.values[np.abs(v)], np.conj(self.values[np.abs(v)]))
        return result if np.ndim(result) else complex(result)


def Autocorrelation(spectrum, P):
    lags = np.arange(P)
    if spectrum.kind == CLARKE:
        values = spectrum.power * special.j0(2.0 * np.pi * spectrum.F * lags) + 0j
    elif spectrum.kind == FLAT_BAND:
        lo, hi = spectrum.band
        values = spectrum.power * np.exp(1j * np.pi * (lo + hi) * lags) * np.sinc((hi - lo) * lags)
    else:
        N = spectrum.samples.size
        # exact inverse transform of a piecewise-constant density on N bins
        values = np.fft.ifft(spectrum.samples)[lags % N] * np.sinc(lags / N)
    values[0] = spectrum.power
    values.setflags(write=False)
    return AutocorrelationSequence(values=values, spectrum=spectrum)


def CirculantColumn(r):
    """
    First column of the circulant approximation of the Toeplitz covariance.

    Each lag i of the column combines the Toeplitz entries r(i) and r(i - P)
    weighted by how often they occur, which keeps C positive semidefinite with
    eigenvalues equal to the diagonal of F R F^H.
    """
    P = len(r)
    lags = np.arange(P)
    wrapped = np.conj(r.values[(P - lags) % P])
    column = (1.0 - lags / P) * r.values + (lags / P) * wrapped
    column[0] = r.values[0]
    return column


def SpectrumSamples(spectrum, P):
    """Bin-averaged PSD P * integral_{bin p} S on the DFT grid, in FFT order."""
    centres = WrapFrequency(np.arange(P) / P)
    half = 0.5 / P
    return P * (spectrum.cdf(centres + half) - spectrum.cdf(centres - half))


@dataclass(frozen=True, eq=False)
class ChannelCovariance:
    """
    Covariance of P consecutive channel samples.

    `eigenvalues` are the (clamped) eigenvalues of the circulant approximation
    in FFT order; the Toeplitz matrix and its factor are built on demand.
    """
    P: int
    autocorrelation: AutocorrelationSequence
    eigenvalues: np.ndarray
    spectrum: DopplerSpectrum = field(default=None)

    @property
    def r0(self):
        return float(self.autocorrelation.values[0].real)

    @cached_property
    def first_column(self):
        return CirculantColumn(self.autocorrelation)

    @cached_property
    def circulant(self):
        return scipy.linalg.circulant(self.first_column)

    @cached_property
    def toeplitz(self):
        r = self.autocorrelation.values
        if np.all(r.imag == 0):
            return scipy.linalg.toeplitz(r.real)
        return scipy.linalg.toeplitz(r, np.conj(r))

    @cached_property
    def samples(self):
        return SpectrumSamples(self.spectrum, self.P)

    @cached_property
    def factor(self):
        """P x rank matrix L with R = L L^H (negligible directions dropped)."""
        values, vectors = scipy.linalg.eigh(self.toeplitz)
        keep = values > FACTOR_FLOOR * max(values.max(), 0.0)
        logger.debug("Toeplitz factor of size %d keeps rank %d", self.P, int(keep.sum()))
        return vectors[:, keep] * np.sqrt(values[keep])

    def leading(self, P):
        """Covariance of the first P samples, reusing this factor's rows."""
        sub = BuildCovariance(self.spectrum, P)
        if "factor" in self.__dict__:
            sub.__dict__["factor"] = self.factor[:P]
        return sub

    def matvec(self, x):
        """R @ x through an FFT Toeplitz product."""
        r = self.autocorrelation.values
        return scipy.linalg.matmul_toeplitz((r, np.conj(r)), x)


def BuildCovariance(spectrum, P):
    if P < 2:
        raise SpectrumError("observation length P must be at least 2")
    r = Autocorrelation(spectrum, P)
    column = CirculantColumn(r)
    raw = np.fft.fft(column).real
    eigenvalues = np.clip(raw, 0.0, None)
    clampedMass = float(eigenvalues.sum() - raw.sum())
    if clampedMass >= 1e-3 * P:
        logger.warning("Eigenvalue clamp moved %.3g of spectral mass (P=%d, %s)", clampedMass, P, spectrum.kind)
    eigenvalues.setflags(write=False)
    return ChannelCovariance(P=P, autocorrelation=r, eigenvalues=eigenvalues, spectrum=spectrum)


def IntegratePsd(spectrum):
    """Total spectral mass by quadrature (xi = F sin(theta) inside Clarke bands)."""
    if spectrum.kind == CLARKE:
        F = spectrum.F

        def substituted(theta):
            # S(F sin theta) F cos theta: the edge singularity cancels
            return spectrum.power * ClarkePsd(F, F * math.sin(theta)) * F * math.cos(theta)

        value, _ = integrate.quad(substituted, -np.pi / 2, np.pi / 2, epsabs=1e-12)
        return value
    if spectrum.kind == FLAT_BAND:
        lo, hi = spectrum.band
        value, _ = integrate.quad(spectrum.density, lo, hi, epsabs=1e-12)
        return value
    return float(spectrum.samples.mean())


@dataclass(frozen=True, eq=False)
class FadingRealization:
    samples: np.ndarray
    seed: object
    spectrum: DopplerSpectrum
    method: str = "circulant"


def ComplexGaussian(rng, shape):
    """Standard circular complex Gaussian draws (unit variance)."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def SynthesizeRealization(cov, M, seed, method="circulant"):
    """
    Draw M independent antenna columns of the stationary channel process.

    "circulant" scales P white draws by sqrt(eigenvalue) and applies the
    unitary inverse DFT, so the columns have covariance exactly C.
    "toeplitz" colours draws with the eigen-factor of R instead.
    """
    rng = np.random.default_rng(seed)
    if method == "circulant":
        g = ComplexGaussian(rng, (cov.P, M))
        samples = np.sqrt(cov.P) * np.fft.ifft(np.sqrt(cov.eigenvalues)[:, None] * g, axis=0)
    elif method == "toeplitz":
        L = cov.factor
        samples = L @ ComplexGaussian(rng, (L.shape[1], M))
    else:
        raise SpectrumError(f"unknown synthesis method {method!r}")
    return FadingRealization(samples=samples, seed=seed, spectrum=cov.spectrum, method=method)


def SampleAutocorrelation(samples, maxLag):
    """r_hat(v) = mean over antennas and n of h(n+v) h(n)*, v = 0..maxLag."""
    samples = samples.samples if isinstance(samples, FadingRealization) else np.asarray(samples)
    if samples.ndim == 1:
        samples = samples[:, None]
    P = samples.shape[0]
    return np.array([np.mean(samples[v:] * np.conj(samples[:P - v])) for v in range(maxLag + 1)])
