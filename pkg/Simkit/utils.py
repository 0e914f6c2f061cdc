"""
Monte-Carlo harness for multi-user uplink sounding with inter-cell
contamination and for the TDD downlink that reuses the uplink estimates.

Noise variance is 1 throughout, so every power is an SNR. Users carry unit
power Clarke channels scaled by rho_k; the contamination is a flat-band
process received through an all-ones pilot.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from Fading.utils import (
    BuildCovariance,
    ComplexGaussian,
    DopplerSpectrum,
    SpectrumError,
    SynthesizeRealization,
    WrapFrequency,
)
from Pilots.utils import (
    ConventionalPilots,
    FftPilot,
    StaggeredShifts,
    PilotError,
    PlanAlignment,
)
from Estimation.utils import (
    DbToLinear,
    EstimateReport,
    FiniteMse,
    MmseEstimates,
    ProcessingGainFromMse,
    SceneUser,
    UplinkScene,
)

logger = logging.getLogger(__name__)

PSD_ALIGN = "psdalign"
HADAMARD = "hadamard"
SCHEMES = (PSD_ALIGN, HADAMARD)

STAGGERED_SHIFTS = "staggered"
PLANNED_SHIFTS = "plan"
EXPLICIT_SHIFTS = "explicit"
SHIFT_MODES = (STAGGERED_SHIFTS, PLANNED_SHIFTS, EXPLICIT_SHIFTS)

ESTIMATED_CSI = "estimated"
PERFECT_CSI = "perfect"
RANDOM_CSI = "random"
CSI_MODES = (ESTIMATED_CSI, PERFECT_CSI, RANDOM_CSI)

AXIS_P = "P"
AXIS_SNR = "snr"

NOISE_VARIANCE = 1.0
CONFIDENCE_Z = 1.96


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Numerology:
    sampling_hz: float = 5000.0
    symbol_duration: float = 66.67e-6


@dataclass(frozen=True)
class ArraySetup:
    M: int = 16


@dataclass(frozen=True)
class UserSetup:
    doppler_hz: float = 10.0
    # relative to the pilot SNR
    power_db: float = 0.0
    # tau / P, only read in explicit shift mode
    shift: float = None


@dataclass(frozen=True)
class ContaminationSetup:
    enabled: bool = True
    band: tuple = (-0.375, 0.375)
    inr_db: float = 0.0


@dataclass(frozen=True)
class PilotSetup:
    schemes: tuple = SCHEMES
    shift_mode: str = STAGGERED_SHIFTS
    offset: float = 0.375
    spacing: float = 1.0 / 36.0
    snr_db: float = 0.0


@dataclass(frozen=True)
class DownlinkSetup:
    lag: int = 1
    snr_db: float = None
    csi: str = ESTIMATED_CSI


@dataclass(frozen=True)
class SweepSetup:
    axis: str = AXIS_P
    values: tuple = (512, 1024, 2048, 4096)


@dataclass(frozen=True)
class RunSetup:
    P: int = 4096
    trials: int = 200
    seed: int = 20240601


@dataclass(frozen=True)
class PlanSetup:
    guard_bins: float = 0.0
    integer: bool = False
    forbidden: tuple = ()


@dataclass(frozen=True)
class ValidationSetup:
    trials: int = 200
    P: int = 4096
    M: int = 16
    draws: int = 500
    convergence_P: tuple = (512, 1024, 2048, 4096)
    run_monte_carlo: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    numerology: Numerology = field(default_factory=Numerology)
    array: ArraySetup = field(default_factory=ArraySetup)
    users: tuple = field(default_factory=lambda: tuple(UserSetup() for _ in range(8)))
    contamination: ContaminationSetup = field(default_factory=ContaminationSetup)
    pilots: PilotSetup = field(default_factory=PilotSetup)
    downlink: DownlinkSetup = field(default_factory=DownlinkSetup)
    sweep: SweepSetup = field(default_factory=SweepSetup)
    run: RunSetup = field(default_factory=RunSetup)
    plan: PlanSetup = field(default_factory=PlanSetup)
    validation: ValidationSetup = field(default_factory=ValidationSetup)

    @property
    def K(self):
        return len(self.users)

    @property
    def dopplers(self):
        """Normalized Doppler F_k = f_D / f_s of every user."""
        return [user.doppler_hz / self.numerology.sampling_hz for user in self.users]

    def as_dict(self):
        return asdict(self)


@dataclass
class RunResult:
    scheme: str
    P: int
    snr_db: float
    seeds: tuple
    nmse: np.ndarray
    nmse_halfwidth: np.ndarray
    analytic_nmse: np.ndarray
    finite_nmse: np.ndarray
    interference_free_nmse: np.ndarray
    gain_db: list
    analytic_gain_db: list
    sum_se: float = None
    sum_se_halfwidth: float = None
    csi: str = None
    mean_nmse_halfwidth: float = None
    shifts: tuple = ()
    slots: int = None
    reports: list = field(default_factory=list)

    def axis_value(self, axis):
        return self.P if axis == AXIS_P else self.snr_db

    def summary(self):
        payload = {
            "scheme": self.scheme,
            "P": self.P,
            "snr_db": self.snr_db,
            "mean_nmse": float(np.mean(self.nmse)),
            "mean_nmse_halfwidth": self.mean_nmse_halfwidth,
            "mean_analytic_nmse": float(np.mean(self.analytic_nmse)),
            "trials": len(self.seeds),
            "pilot_slots": self.slots,
            "users": [report.as_dict() for report in self.reports],
        }
        if self.sum_se is not None:
            payload.update({"sum_se": self.sum_se, "sum_se_halfwidth": self.sum_se_halfwidth, "csi": self.csi})
        return payload


def TrialSeeds(master, trials):
    """Per-trial seeds drawn deterministically from the master seed."""
    if trials < 1:
        raise ExperimentError("at least one trial is needed")
    states = np.random.SeedSequence(int(master)).generate_state(trials, dtype=np.uint64)
    return tuple(int(seed) for seed in states)


def ConfidenceHalfWidth(values, axis=0):
    """95% normal half-width of the mean of independent trial values."""
    values = np.asarray(values, dtype=float)
    T = values.shape[axis]
    if T < 2:
        return np.zeros(np.delete(values.shape, axis)) if values.ndim > 1 else 0.0
    return CONFIDENCE_Z * np.std(values, axis=axis, ddof=1) / math.sqrt(T)


@lru_cache(maxsize=32)
def _TimelineCovariance(F, n):
    return BuildCovariance(DopplerSpectrum.clarke(F), n)


@lru_cache(maxsize=8)
def _BandCovariance(band, n):
    return BuildCovariance(DopplerSpectrum.flat_band(*band), n)


def _Leading(timeline, P):
    timeline.factor
    return timeline.leading(P)


@lru_cache(maxsize=32)
def _PilotCovariance(F, P, n):
    return _Leading(_TimelineCovariance(F, n), P)


@lru_cache(maxsize=8)
def _PilotBandCovariance(band, P, n):
    return _Leading(_BandCovariance(band, n), P)


def UserShifts(config, P):
    """Cyclic shifts tau_k for the PSD-aligned scheme."""
    mode = config.pilots.shift_mode
    if mode == STAGGERED_SHIFTS:
        return StaggeredShifts(config.K, P, config.pilots.offset, config.pilots.spacing)
    if mode == EXPLICIT_SHIFTS:
        missing = [k for k, user in enumerate(config.users) if user.shift is None]
        if missing:
            raise ExperimentError(f"explicit shift mode but users {missing} have no shift")
        return [P * (user.shift % 1.0) for user in config.users]
    if mode == PLANNED_SHIFTS:
        forbidden = list(config.plan.forbidden)
        if config.contamination.enabled:
            forbidden.append(tuple(config.contamination.band))
        plan = PlanAlignment(
            config.dopplers,
            forbidden=forbidden,
            P=P,
            guard=config.plan.guard_bins / P,
            integer=config.plan.integer,
        )
        return list(plan.shifts)
    raise ExperimentError(f"unknown shift mode {mode!r}")


@dataclass(frozen=True, eq=False)
class SimulationSetup:
    """
    Everything one (scheme, P, SNR) point needs, shared read-only by the trials.
    `P` labels the sweep point; `slots` is the pilot length actually sent.
    """
    config: ExperimentConfig
    scheme: str
    P: int
    slots: int
    snr_db: float
    scene: UplinkScene
    timelines: tuple
    contamination: object = None
    contamination_power: float = 0.0
    shifts: tuple = ()

    @property
    def n(self):
        return self.slots + self.config.downlink.lag

    @property
    def M(self):
        return self.config.array.M


def BuildSetup(config, scheme, P, snr_db):
    """
    Pilots, covariances and the factorized system matrix of one sweep point.

    The aligned scheme sounds over P slots; the Hadamard baseline sends its
    N-slot block and is reported under the same P.
    """
    if scheme not in SCHEMES:
        raise ExperimentError(f"unknown pilot scheme {scheme!r}")
    dopplers = config.dopplers
    try:
        if scheme == PSD_ALIGN:
            shifts = tuple(UserShifts(config, P))
            pilots = [FftPilot(tau, P=P) for tau in shifts]
        else:
            shifts = ()
            pilots = ConventionalPilots(config.K)
    except (PilotError, SpectrumError) as e:
        logger.error("Pilot setup failed for %s at P=%d: %s", scheme, P, e)
        raise
    slots = pilots[0].P
    n = slots + config.downlink.lag

    users = []
    for user, F, pilot in zip(config.users, dopplers, pilots):
        rho = DbToLinear(snr_db + user.power_db)
        users.append(SceneUser(pilot=pilot, covariance=_PilotCovariance(F, slots, n), power=rho))
    timelines = tuple(_TimelineCovariance(F, n) for F in dopplers)

    interferers = ()
    contamination = None
    contaminationPower = 0.0
    if config.contamination.enabled:
        band = tuple(float(edge) for edge in config.contamination.band)
        contaminationPower = DbToLinear(snr_db + config.contamination.inr_db)
        interferers = (SceneUser(pilot=FftPilot(0, P=slots), covariance=_PilotBandCovariance(band, slots, n), power=contaminationPower),)
        contamination = _BandCovariance(band, n)

    scene = UplinkScene(users=tuple(users), noise=NOISE_VARIANCE, interferers=interferers)
    scene.factorization
    logger.info("Prepared %s at P=%d over %d slots, SNR %.1f dB (%d users)", scheme, P, slots, snr_db, config.K)
    return SimulationSetup(
        config=config,
        scheme=scheme,
        P=P,
        slots=slots,
        snr_db=snr_db,
        scene=scene,
        timelines=timelines,
        contamination=contamination,
        contamination_power=contaminationPower,
        shifts=shifts,
    )


def SimulateObservation(setup, rng):
    """Draw the channels over slots + L and the pilot observations (slots x M)."""
    channels = [SynthesizeRealization(cov, setup.M, rng, method="toeplitz").samples for cov in setup.timelines]
    slots = setup.slots
    y = math.sqrt(NOISE_VARIANCE) * ComplexGaussian(rng, (slots, setup.M))
    for user, h in zip(setup.scene.users, channels):
        y += math.sqrt(user.power) * user.pilot.values[:, None] * h[:slots]
    if setup.contamination is not None:
        c = SynthesizeRealization(setup.contamination, setup.M, rng, method="toeplitz").samples
        y += math.sqrt(setup.contamination_power) * c[:slots]
    return y, channels


def _Beam(vector, k):
    norm = np.linalg.norm(vector)
    if norm == 0:
        logger.warning("User %d has an all-zero beam and is skipped", k)
        return None
    return vector / norm


def DownlinkRates(setup, estimates, channels, rng):
    """Per-user log2(1 + SINR) under matched-filter beams, L slots after the last pilot."""
    last, L = setup.slots - 1, setup.config.downlink.lag
    csi = setup.config.downlink.csi
    snr_db = setup.config.downlink.snr_db
    rhoDl = DbToLinear(setup.snr_db if snr_db is None else snr_db)
    beams = []
    for k, (estimate, h) in enumerate(zip(estimates, channels)):
        if csi == ESTIMATED_CSI:
            vector = estimate[last]
        elif csi == PERFECT_CSI:
            vector = h[last]
        else:
            vector = ComplexGaussian(rng, (setup.M,))
        beams.append(_Beam(vector, k))
    active = [k for k, w in enumerate(beams) if w is not None]
    rates = np.zeros(len(channels))
    for k in active:
        h = channels[k][last + L]
        gains = {g: abs(np.vdot(h, beams[g])) ** 2 for g in active}
        interference = sum(gain for g, gain in gains.items() if g != k)
        sinr = rhoDl * gains[k] / (rhoDl * interference + NOISE_VARIANCE)
        rates[k] = math.log2(1.0 + sinr)
    return rates


def _Trial(setup, seed, downlink):
    rng = np.random.default_rng(seed)
    y, channels = SimulateObservation(setup, rng)
    estimates = MmseEstimates(y, setup.scene)
    slots, M = setup.slots, setup.M
    nmse = np.empty(len(channels))
    for k, (estimate, h, user) in enumerate(zip(estimates, channels, setup.scene.users)):
        error = estimate - h[:slots]
        nmse[k] = np.vdot(error, error).real / (slots * user.covariance.r0 * M)
    rates = DownlinkRates(setup, estimates, channels, rng) if downlink else None
    return nmse, rates


def _MapTrials(setup, seeds, downlink, jobs):
    if jobs <= 1:
        return [_Trial(setup, seed, downlink) for seed in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        # map keeps trial order, so the reduction is replayable
        return list(executor.map(lambda seed: _Trial(setup, seed, downlink), seeds))


def _Reports(setup):
    scene = setup.scene
    reports, alone = [], {}
    for k, (user, F) in enumerate(zip(scene.users, setup.config.dopplers)):
        # the single-user MSE does not depend on which unit-modulus pilot is used
        key = (F, user.power)
        if key not in alone:
            alone[key] = FiniteMse(scene.alone(k), 0)
        reports.append(EstimateReport(scene, k, interference_free=alone[key]))
    return reports


def _GainOrNone(mse, snr):
    try:
        return ProcessingGainFromMse(mse, snr)
    except ValueError:
        return None


def RunPoint(config, scheme, P=None, snr_db=None, downlink=False, jobs=1, seeds=None):
    P = config.run.P if P is None else int(P)
    snr_db = config.pilots.snr_db if snr_db is None else float(snr_db)
    seeds = TrialSeeds(config.run.seed, config.run.trials) if seeds is None else tuple(seeds)
    setup = BuildSetup(config, scheme, P, snr_db)
    outcomes = _MapTrials(setup, seeds, downlink, jobs)

    perTrial = np.array([nmse for nmse, _ in outcomes])
    nmse = perTrial.mean(axis=0)
    halfwidth = np.atleast_1d(ConfidenceHalfWidth(perTrial))
    reports = _Reports(setup)
    users = setup.scene.users
    for report, value, spread in zip(reports, nmse, halfwidth):
        report.empirical_nmse = float(value)
        report.ci_halfwidth = float(spread)
    r0 = np.array([user.covariance.r0 for user in users])
    finite = np.array([report.finite_mse for report in reports]) / r0
    # a silent user keeps its whole channel power as error
    analytic = np.array([
        report.small_alpha_mse if report.small_alpha_mse is not None else report.finite_mse / r
        for report, r in zip(reports, r0)
    ])

    result = RunResult(
        scheme=scheme,
        P=P,
        snr_db=snr_db,
        seeds=seeds,
        nmse=nmse,
        nmse_halfwidth=halfwidth,
        mean_nmse_halfwidth=float(ConfidenceHalfWidth(perTrial.mean(axis=1))),
        analytic_nmse=analytic,
        finite_nmse=finite,
        interference_free_nmse=np.array([report.interference_free_mse for report in reports]) / r0,
        gain_db=[_GainOrNone(value, user.power / setup.scene.noise) for value, user in zip(nmse, users)],
        analytic_gain_db=[report.processing_gain_db for report in reports],
        shifts=tuple(setup.shifts),
        slots=setup.slots,
        reports=reports,
    )
    if downlink:
        sums = np.array([rates.sum() for _, rates in outcomes])
        result.sum_se = float(sums.mean())
        result.sum_se_halfwidth = float(ConfidenceHalfWidth(sums))
        result.csi = config.downlink.csi
    logger.info("%s P=%d SNR %.1f dB: mean nMSE %.4g", scheme, P, snr_db, float(nmse.mean()))
    return result


def RunUplink(config, scheme=PSD_ALIGN, P=None, snr_db=None, jobs=1, seeds=None):
    """Empirical and analytic nMSE and processing gain of every user."""
    return RunPoint(config, scheme, P=P, snr_db=snr_db, downlink=False, jobs=jobs, seeds=seeds)


def RunDownlink(config, scheme=PSD_ALIGN, P=None, snr_db=None, jobs=1, seeds=None):
    """Uplink estimation followed by the matched-filter downlink sum rate."""
    return RunPoint(config, scheme, P=P, snr_db=snr_db, downlink=True, jobs=jobs, seeds=seeds)


def SweepPoints(config):
    if not config.sweep.values:
        raise ExperimentError("sweep axis has no values")
    if config.sweep.axis == AXIS_P:
        return [(int(value), config.pilots.snr_db) for value in config.sweep.values]
    if config.sweep.axis == AXIS_SNR:
        return [(config.run.P, float(value)) for value in config.sweep.values]
    raise ExperimentError(f"unknown sweep axis {config.sweep.axis!r}")


def Sweep(config, downlink=False, jobs=1):
    """Every scheme at every sweep point, with one shared set of trial seeds."""
    seeds = TrialSeeds(config.run.seed, config.run.trials)
    results = []
    for scheme in config.pilots.schemes:
        for P, snr_db in SweepPoints(config):
            results.append(RunPoint(config, scheme, P=P, snr_db=snr_db, downlink=downlink, jobs=jobs, seeds=seeds))
    return results


def ContaminationPeriodogram(config, P, trials, seed=None):
    """Average periodogram |fft(c)|^2 / P of the contamination process, in FFT order."""
    band = tuple(float(edge) for edge in config.contamination.band)
    cov = _BandCovariance(band, P)
    rng = np.random.default_rng(config.run.seed if seed is None else seed)
    total = np.zeros(P)
    for _ in range(trials):
        c = SynthesizeRealization(cov, config.array.M, rng, method="toeplitz").samples
        total += np.mean(np.abs(np.fft.fft(c, axis=0)) ** 2, axis=1) / P
    return WrapFrequency(np.arange(P) / P), total / trials
