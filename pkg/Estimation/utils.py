"""
MMSE channel estimation for multi-user uplink sounding and the analytic MSE
expressions that go with it: exact finite-P error covariance, the eigenvalue
sum of the circulant model, the asymptotic PSD integral, the Clarke closed
form and its small-alpha / processing-gain approximations.
"""
import logging
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy import integrate

from Fading.utils import CLARKE, FLAT_BAND, WrapFrequency
from Pilots.utils import FFT

logger = logging.getLogger(__name__)

QUADRATURE_TOLERANCE = 1e-10
QUADRATURE_LIMIT = 400


class EstimationError(ArithmeticError):
    pass


class NoProcessingGain(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneUser:
    """One transmitter: pilot, channel covariance and linear receive power."""
    pilot: object
    covariance: object
    power: float = 1.0


@dataclass(frozen=True, eq=False)
class UplinkScene:
    """
    Users to estimate plus interferers that are only modelled (same statistics,
    never estimated), received in noise of variance `noise`.
    """
    users: tuple
    noise: float = 1.0
    interferers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.users:
            raise ValueError("a scene needs at least one user")
        P = self.users[0].pilot.P
        for member in self.members:
            if member.pilot.P != P or member.covariance.P != P:
                raise ValueError(f"pilot and covariance lengths must all equal P={P}")
            if member.power < 0:
                raise ValueError(f"received power must be nonnegative, got {member.power}")
        if self.noise < 0:
            raise ValueError(f"noise variance must be nonnegative, got {self.noise}")

    @property
    def P(self):
        return self.users[0].pilot.P

    @property
    def members(self):
        return tuple(self.users) + tuple(self.interferers)

    def alone(self, k):
        """User k by itself in the same noise (the interference-free scene)."""
        return UplinkScene(users=(self.users[k],), noise=self.noise)

    @cached_property
    def system(self):
        return SystemMatrix(self)

    @cached_property
    def factorization(self):
        try:
            return scipy.linalg.cho_factor(self.system, lower=True, check_finite=False)
        except np.linalg.LinAlgError as e:
            logger.error("System matrix is singular (noise %.3g, P=%d)", self.noise, self.P)
            raise EstimationError(
                "system matrix is not positive definite; add noise or regularize the covariances"
            ) from e

    def solve(self, b):
        return scipy.linalg.cho_solve(self.factorization, b, check_finite=False)


def SystemMatrix(scene):
    """sigma^2 I + sum_g rho_g X_g R_g X_g^H over users and interferers."""
    A = scene.noise * np.eye(scene.P, dtype=complex)
    for member in scene.members:
        if member.power == 0:
            continue
        x = member.pilot.values
        A += member.power * (np.outer(x, np.conj(x)) * member.covariance.toeplitz)
    return A


def MmseEstimate(y, scene, k):
    """
    sqrt(rho_k) R_k X_k^H A^{-1} y for one observation vector or a P x M block
    (one column per antenna).
    """
    user = scene.users[k]
    y = np.asarray(y)
    if y.shape[0] != scene.P:
        raise ValueError(f"observation has {y.shape[0]} rows, expected P={scene.P}")
    if user.power == 0:
        return np.zeros(y.shape, dtype=complex)
    z = scene.solve(y)
    x = user.pilot.values
    derotated = np.conj(x)[:, None] * z if z.ndim == 2 else np.conj(x) * z
    return math.sqrt(user.power) * user.covariance.matvec(derotated)


def MmseEstimates(y, scene):
    """Estimates of every user from one shared solve of the system matrix."""
    z = scene.solve(np.asarray(y))
    estimates = []
    for user in scene.users:
        if user.power == 0:
            estimates.append(np.zeros(z.shape, dtype=complex))
            continue
        derotated = np.conj(user.pilot.values)[:, None] * z if z.ndim == 2 else np.conj(user.pilot.values) * z
        estimates.append(math.sqrt(user.power) * user.covariance.matvec(derotated))
    return estimates


def ErrorCovariance(scene, k):
    """Exact P x P error covariance R - rho R X^H A^{-1} X R and its trace / P."""
    user = scene.users[k]
    R = user.covariance.toeplitz.astype(complex)
    if user.power == 0:
        return R, float(np.real(np.trace(R))) / scene.P
    B = user.pilot.values[:, None] * R
    E = R - user.power * (B.conj().T @ scene.solve(B))
    E = (E + E.conj().T) / 2.0
    return E, float(np.real(np.trace(E))) / scene.P


def FiniteMse(scene, k):
    """trace(E)/P through the low-rank covariance factor (no P x P solve)."""
    user = scene.users[k]
    cov = user.covariance
    total = scene.P * cov.r0
    if user.power == 0:
        return total / scene.P
    L = cov.factor
    B = user.pilot.values[:, None] * L
    G = B.conj().T @ scene.solve(B)
    gram = L.conj().T @ L
    reduction = user.power * float(np.real(np.sum(gram * G.T)))
    return (total - reduction) / scene.P


def CirculantMse(lambdaK, rho, noise, interferers=()):
    """
    (1/P) sum_p [lambda_p - rho lambda_p^2 / (rho lambda_p + I_p + sigma^2)]

    with I_p = sum_g rho_g lambda_g(p - shift_g); `interferers` holds
    (eigenvalues, whole-bin shift, power) triples.
    """
    lambdaK = np.asarray(lambdaK, dtype=float)
    interference = np.zeros_like(lambdaK)
    for eigenvalues, shift, power in interferers:
        interference += power * np.roll(np.asarray(eigenvalues, dtype=float), int(round(shift)))
    denominator = rho * lambdaK + interference + noise
    captured = np.divide(rho * lambdaK ** 2, denominator, out=np.zeros_like(lambdaK), where=denominator > 0)
    return float(np.mean(lambdaK - captured))


def _Breakpoints(spectrumK, interferers):
    # interferer support edges (after shifting) that fall inside the user's band
    lo, hi = spectrumK.support()[0]
    points = set()
    for spectrum, shift, _ in interferers:
        for a, b in spectrum.support():
            for edge in (a + shift, b + shift):
                for turn in (-1.0, 0.0, 1.0):
                    point = WrapFrequency(edge) + turn
                    if lo < point < hi:
                        points.add(point)
    return sorted(points)


def _Interference(interferers, xi):
    total = 0.0
    for spectrum, shift, power in interferers:
        if power:
            total += power * spectrum.density(xi - shift)
    return total


def AsymptoticMse(spectrumK, interferers, rhoK, noise):
    """
    r(0) - integral of rho_k S_k^2 / (rho_k S_k + sum_g rho_g S_g(xi - shift_g) + sigma^2).

    Interferer shifts are normalized frequencies (delta tau / P). Clarke bands
    are integrated in theta with xi = F sin(theta), which removes the edge
    singularity; the interval is split wherever a shifted interferer starts
    or stops.
    """
    interferers = [(spectrum, float(shift), float(power)) for spectrum, shift, power in interferers]
    power = spectrumK.power
    if rhoK == 0 or power == 0:
        return power
    breakpoints = _Breakpoints(spectrumK, interferers)

    if spectrumK.kind == CLARKE:
        F = spectrumK.F
        edges = [-math.pi / 2] + [math.asin(point / F) for point in breakpoints] + [math.pi / 2]

        def integrand(theta):
            other = _Interference(interferers, F * math.sin(theta)) + noise
            return (power / math.pi) * rhoK * power / (rhoK * power + other * math.pi * F * math.cos(theta))
    else:
        lo, hi = spectrumK.support()[0]
        edges = [lo] + breakpoints + [hi]
        if spectrumK.kind != FLAT_BAND:
            N = spectrumK.samples.size
            grid = (np.arange(-N // 2, N // 2 + 1) + 0.5) / N
            edges = sorted(set(edges) | {float(g) for g in grid if lo < g < hi})

        def integrand(xi):
            S = spectrumK.density(xi)
            denominator = rhoK * S + _Interference(interferers, xi) + noise
            return rhoK * S * S / denominator if denominator > 0 else S

    captured = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a <= 0:
            continue
        value, _ = integrate.quad(
            integrand, a, b,
            epsabs=QUADRATURE_TOLERANCE, epsrel=QUADRATURE_TOLERANCE, limit=QUADRATURE_LIMIT,
        )
        captured += value
    return max(power - captured, 0.0)


def ClarkeClosedForm(alpha):
    """Asymptotic Clarke MSE as a function of alpha = pi F sigma^2 / rho (unit power)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if alpha == 1:
        return 1.0 - 2.0 / math.pi
    if alpha < 1:
        root = math.sqrt(1.0 - alpha * alpha)
        return 1.0 - 4.0 / (math.pi * root) * math.atan(math.sqrt((1.0 - alpha) / (1.0 + alpha)))
    root = math.sqrt(alpha * alpha - 1.0)
    excess = alpha - 1.0
    # ln((root + excess) / (root - excess)), accurate as alpha -> 1+
    logarithm = math.log1p(2.0 * excess / (root - excess))
    return 1.0 - 2.0 / (math.pi * root) * logarithm


def ClarkeAlpha(F, snr):
    return math.pi * F / snr


def SmallAlphaMse(F, snr):
    """2F / (rho / sigma^2), valid while pi F << rho / sigma^2."""
    if F <= 0 or snr <= 0:
        raise ValueError("F and the SNR must be positive")
    return 2.0 * F / snr


def ProcessingGain(F, snr):
    """10 log10(1/(2F) - 1/snr) dB."""
    if F <= 0 or snr <= 0:
        raise ValueError("F and the SNR must be positive")
    argument = 1.0 / (2.0 * F) - 1.0 / snr
    if argument <= 0:
        raise NoProcessingGain(f"no processing gain at F={F}, SNR={snr} (argument {argument:.3g})")
    return 10.0 * math.log10(argument)


def ProcessingGainFromMse(mse, snr, r0=1.0):
    """SNR improvement of an estimate with this MSE over the per-sample SNR, in dB."""
    if snr <= 0:
        raise ValueError("SNR must be positive")
    if mse <= 0:
        return math.inf
    argument = (r0 / mse - 1.0) / snr
    if argument <= 0:
        raise NoProcessingGain(f"MSE {mse:.4g} carries no gain over SNR {snr:.4g}")
    return 10.0 * math.log10(argument)


def TaylorCheck(alpha):
    """(closed form, cubic series 2a/pi - a^2/2 + 4a^3/(3 pi)) for 0 < alpha < 1."""
    if not (0 < alpha < 1):
        raise ValueError(f"Taylor check needs 0 < alpha < 1, got {alpha}")
    series = 2.0 * alpha / math.pi - alpha ** 2 / 2.0 + 4.0 * alpha ** 3 / (3.0 * math.pi)
    return ClarkeClosedForm(alpha), series


def DbToLinear(db):
    return 10.0 ** (db / 10.0)


@dataclass
class EstimationReport:
    user: int
    finite_mse: float
    interference_free_mse: float
    asymptotic_mse: float = None
    closed_form_mse: float = None
    small_alpha_mse: float = None
    processing_gain_db: float = None
    empirical_nmse: float = None
    ci_halfwidth: float = None

    def as_dict(self):
        return asdict(self)


def _RelativeShifts(scene, k):
    # normalized frequency offsets of everyone else's derotated pilot, or None
    # when a pilot is not a cyclic shift
    reference = scene.users[k].pilot
    if reference.kind != FFT:
        return None
    shifts = []
    for g, member in enumerate(scene.members):
        if g == k:
            continue
        if member.pilot.kind != FFT or not np.allclose(member.pilot.base, reference.base):
            return None
        shifts.append((member, WrapFrequency((member.pilot.tau - reference.tau) / scene.P)))
    return shifts


def EstimateReport(scene, k, interference_free=None):
    """
    All analytic MSE figures for user k of the scene. A known interference-free
    MSE can be passed in to skip its solve.
    """
    user = scene.users[k]
    spectrum = user.covariance.spectrum
    snr = user.power / scene.noise if scene.noise > 0 else math.inf
    report = EstimationReport(
        user=k,
        finite_mse=FiniteMse(scene, k),
        interference_free_mse=FiniteMse(scene.alone(k), 0) if interference_free is None else interference_free,
    )
    shifts = _RelativeShifts(scene, k)
    if shifts is not None and spectrum is not None:
        interferers = [(member.covariance.spectrum, shift, member.power) for member, shift in shifts]
        report.asymptotic_mse = AsymptoticMse(spectrum, interferers, user.power, scene.noise)
    if spectrum is not None and spectrum.kind == CLARKE and 0 < snr < math.inf:
        report.closed_form_mse = spectrum.power * ClarkeClosedForm(ClarkeAlpha(spectrum.F, snr * spectrum.power))
        report.small_alpha_mse = SmallAlphaMse(spectrum.F, snr)
        try:
            report.processing_gain_db = ProcessingGain(spectrum.F, snr)
        except NoProcessingGain:
            logger.warning("User %d has no processing gain at F=%.4g, SNR=%.3g", k, spectrum.F, snr)
    return report
