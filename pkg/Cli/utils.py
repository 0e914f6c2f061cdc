"""
Plumbing behind the management commands: config loading, atomic result files,
and the analytic / statistical validation suite.
"""
import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.conf import settings

from Fading.utils import (
    BuildCovariance,
    ClarkeAutocorrelation,
    DopplerSpectrum,
    SampleAutocorrelation,
    SynthesizeRealization,
    WrapFrequency,
)
from Pilots.utils import (
    CIRCULANT,
    AlignmentPlan,
    Capacity,
    CheckPlan,
    FftPilot,
    OrthogonalityResidual,
    PlanAlignment,
    ShiftOrthogonal,
)
from Estimation.utils import (
    AsymptoticMse,
    ClarkeClosedForm,
    DbToLinear,
    FiniteMse,
    MmseEstimates,
    ProcessingGain,
    ProcessingGainFromMse,
    SceneUser,
    SmallAlphaMse,
    TaylorCheck,
    UplinkScene,
)
from Simkit.utils import (
    AXIS_P,
    EXPLICIT_SHIFTS,
    HADAMARD,
    PSD_ALIGN,
    BuildSetup,
    RunDownlink,
    RunUplink,
    SimulateObservation,
)
from .serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["scheme", "axis_value", "user", "empirical", "analytic", "ci_halfwidth", "finite_p"]


class ConfigError(ValueError):
    pass


def _FlattenErrors(errors, prefix=""):
    lines = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            lines.extend(_FlattenErrors(value, f"{prefix}.{key}" if prefix else str(key)))
    elif isinstance(errors, list):
        if all(isinstance(item, str) for item in errors):
            lines.extend(f"{prefix}: {item}" for item in errors)
        else:
            for index, item in enumerate(errors):
                if item:
                    lines.extend(_FlattenErrors(item, f"{prefix}[{index}]"))
    else:
        lines.append(f"{prefix}: {errors}")
    return lines


def ParseConfig(data):
    serializer = ExperimentConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError("invalid config:\n  " + "\n  ".join(_FlattenErrors(serializer.errors)))
    return serializer.save()


def LoadConfig(path=None):
    """Read and validate an experiment file; any problem is a ConfigError."""
    path = Path(path or settings.SIMULATION_CONFIG)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return ParseConfig(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def DumpConfig(config):
    return ExperimentConfigSerializer(config).data


def WithSeed(config, seed):
    return config if seed is None else replace(config, run=replace(config.run, seed=int(seed)))


def WithPlan(config, plan):
    """Use the shifts of a stored plan as explicit shifts."""
    if len(plan.shifts) != config.K:
        raise ConfigError(f"plan has {len(plan.shifts)} users, config has {config.K}")
    users = tuple(replace(user, shift=tau / plan.P) for user, tau in zip(config.users, plan.shifts))
    return replace(config, users=users, pilots=replace(config.pilots, shift_mode=EXPLICIT_SHIFTS))


def AtomicWrite(path, text):
    """Write text next to its destination, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", newline="") as outfile:
            outfile.write(text)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise
    logger.debug("Wrote %s", path)
    return path


def _Number(value):
    if value is None:
        return ""
    return f"{float(value):.12g}"


def _CsvText(kind, axis, rows):
    buffer = io.StringIO()
    buffer.write(f"# pilot-alignment {kind} schema v{settings.CSV_SCHEMA_VERSION}; axis={axis}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return buffer.getvalue()


def MseRows(results, axis):
    rows = []
    for result in results:
        for k in range(len(result.nmse)):
            rows.append([
                result.scheme,
                _Number(result.axis_value(axis)),
                k,
                _Number(result.nmse[k]),
                _Number(result.analytic_nmse[k]),
                _Number(result.nmse_halfwidth[k]),
                _Number(result.finite_nmse[k]),
            ])
    return rows


def _GainOrNone(mse, snr):
    try:
        return ProcessingGainFromMse(mse, snr)
    except ValueError:
        return None


def GainRows(results, axis):
    rows = []
    for result in results:
        snr = DbToLinear(result.snr_db)
        for k in range(len(result.nmse)):
            # half the spread of the gain over the nMSE confidence interval
            upper = _GainOrNone(max(result.nmse[k] - result.nmse_halfwidth[k], 1e-300), snr)
            lower = _GainOrNone(result.nmse[k] + result.nmse_halfwidth[k], snr)
            halfwidth = (upper - lower) / 2.0 if upper is not None and lower is not None else None
            rows.append([
                result.scheme,
                _Number(result.axis_value(axis)),
                k,
                _Number(result.gain_db[k]),
                _Number(result.analytic_gain_db[k]),
                _Number(halfwidth),
                _Number(_GainOrNone(result.finite_nmse[k], snr)),
            ])
    return rows


def DlRows(results, axis):
    return [
        [result.scheme, _Number(result.axis_value(axis)), "sum", _Number(result.sum_se), "", _Number(result.sum_se_halfwidth), ""]
        for result in results
    ]


def AggregateText(results, axis, column):
    """Gnuplot data: one index block per scheme, mean over users per axis value."""
    blocks = []
    schemes = list(dict.fromkeys(result.scheme for result in results))
    for scheme in schemes:
        lines = [f"# scheme {scheme}", f"# {axis} empirical analytic ci_halfwidth"]
        for result in results:
            if result.scheme != scheme:
                continue
            if column == "nmse":
                values = (np.mean(result.nmse), np.mean(result.analytic_nmse), result.mean_nmse_halfwidth)
            else:
                values = (result.sum_se, None, result.sum_se_halfwidth)
            lines.append(" ".join([_Number(result.axis_value(axis))] + [_Number(v) if v is not None else "NaN" for v in values]))
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def WriteMseOutputs(outDir, results, axis):
    outDir = Path(outDir)
    return [
        AtomicWrite(outDir / "mse.csv", _CsvText("mse", axis, MseRows(results, axis))),
        AtomicWrite(outDir / "gain.csv", _CsvText("gain", axis, GainRows(results, axis))),
        AtomicWrite(outDir / "mse.dat", AggregateText(results, axis, "nmse")),
    ]


def WriteDlOutputs(outDir, results, axis):
    outDir = Path(outDir)
    return [
        AtomicWrite(outDir / "dlse.csv", _CsvText("dlse", axis, DlRows(results, axis))),
        AtomicWrite(outDir / "dlse.dat", AggregateText(results, axis, "sum_se")),
    ]


def WriteManifest(outDir, config, command, results=()):
    """Config echo, master seed and per-run trial seeds, enough to replay the run."""
    manifest = {
        "command": command,
        "schema_version": settings.CSV_SCHEMA_VERSION,
        "master_seed": config.run.seed,
        "sweep": {
            "axis": config.sweep.axis,
            "values": list(config.sweep.values),
            "assumption": "figure x-axes are not stated; sweeps run over P or pilot SNR",
        },
        "config": DumpConfig(config),
        "runs": [
            {**result.summary(), "seeds": [str(seed) for seed in result.seeds]}
            for result in results
        ],
    }
    return AtomicWrite(Path(outDir) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def WritePlan(path, plan):
    return AtomicWrite(path, json.dumps(plan.to_dict(), indent=2) + "\n")


def LoadPlan(path):
    try:
        return AlignmentPlan.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot read plan {path}: {e}") from e


def ConfigPlan(config, P=None):
    """Alignment plan for the configured users; explicit shifts are checked, not planned."""
    P = config.run.P if P is None else P
    forbidden = list(config.plan.forbidden)
    if config.contamination.enabled:
        forbidden.append(tuple(config.contamination.band))
    guard = config.plan.guard_bins / P
    if config.pilots.shift_mode == EXPLICIT_SHIFTS:
        return AlignmentPlan(
            P=P,
            shifts=tuple(P * (user.shift % 1.0) for user in config.users),
            dopplers=tuple(config.dopplers),
            forbidden=tuple(forbidden),
            guard=guard,
        )
    return PlanAlignment(config.dopplers, forbidden=forbidden, P=P, guard=guard, integer=config.plan.integer)


def PlanTable(plan):
    """Shift table with the free margin from each user to its nearest neighbour or band."""
    lines = [f"{'user':>4} {'F':>10} {'tau':>12} {'tau/P':>10} {'centre':>10} {'margin':>10}"]
    centres = plan.centres
    for k, (tau, F, centre) in enumerate(zip(plan.shifts, plan.dopplers, centres)):
        gaps = []
        for g, (otherF, other) in enumerate(zip(plan.dopplers, centres)):
            if g != k:
                gaps.append(abs(WrapFrequency(centre - other)) - F - otherF)
        for lo, hi in plan.forbidden:
            gaps.append(abs(WrapFrequency(centre - (lo + hi) / 2.0)) - F - (hi - lo) / 2.0)
        margin = min(gaps) if gaps else 1.0 - 2.0 * F
        lines.append(f"{k:>4} {F:>10.6g} {tau:>12.6f} {tau / plan.P:>10.6f} {centre:>10.6f} {margin:>10.6f}")
    return "\n".join(lines)


# Validation suite

def CheckPayload(name, target, measured, tolerance, passed, detail=None):
    return {
        "status": bool(passed),
        "message": name,
        "data": {"target": target, "measured": measured, "tolerance": tolerance},
        "error": None if passed else (detail or f"{name}: measured {measured} outside tolerance {tolerance}"),
    }


def CheckClosedForm(F, scale):
    worst, measured = 0.0, {}
    spectrum = DopplerSpectrum.clarke(F)
    for alpha in (0.05, 0.2, 1.0, 5.0):
        quadrature = AsymptoticMse(spectrum, [], math.pi * F / alpha, 1.0)
        gap = abs(quadrature - ClarkeClosedForm(alpha))
        measured[str(alpha)] = gap
        worst = max(worst, gap)
    tolerance = 1e-6 * scale
    return CheckPayload("closed_form_consistency", 0.0, measured, tolerance, worst < tolerance)


def CheckBoundary(scale):
    target = 1.0 - 2.0 / math.pi
    exact = abs(ClarkeClosedForm(1.0) - target)
    branches = max(abs(ClarkeClosedForm(1.0 - 1e-6) - target), abs(ClarkeClosedForm(1.0 + 1e-6) - target))
    passed = exact <= 1e-12 * scale and branches <= 1e-4 * scale
    return CheckPayload(
        "boundary_value", target, {"at_one": exact, "branches": branches},
        {"at_one": 1e-12 * scale, "branches": 1e-4 * scale}, passed,
    )


def CheckTaylor(scale):
    measured, passed = {}, True
    for alpha, limit in ((0.1, 0.2), (0.01, 0.02)):
        exact, series = TaylorCheck(alpha)
        ratio = abs(exact - series) / alpha ** 3
        measured[str(alpha)] = ratio
        passed = passed and ratio <= limit * scale
    return CheckPayload("taylor_residual", 0.0, measured, {"0.1": 0.2 * scale, "0.01": 0.02 * scale}, passed)


def CheckSmallAlpha(F, snr, scale):
    small = SmallAlphaMse(F, snr)
    closed = ClarkeClosedForm(math.pi * F / snr)
    relative = abs(closed - small) / small
    gain = ProcessingGain(F, snr)
    gainGap = abs(ProcessingGainFromMse(small, snr) - gain)
    passed = relative <= 0.01 * scale and gainGap <= 1e-6 * scale
    return CheckPayload(
        "small_alpha_and_gain",
        {"mse": small, "gain_db": gain},
        {"closed_form": closed, "relative_gap": relative, "gain_gap_db": gainGap},
        {"relative_gap": 0.01 * scale, "gain_gap_db": 1e-6 * scale},
        passed,
    )


def CheckConvergence(F, snr, sizes, covariances, scale):
    spectrum = DopplerSpectrum.clarke(F)
    limit = AsymptoticMse(spectrum, [], snr, 1.0)
    values = []
    for P in sizes:
        scene = UplinkScene(users=(SceneUser(pilot=FftPilot(0, P=P), covariance=covariances(P), power=snr),), noise=1.0)
        values.append(FiniteMse(scene, 0))
    monotone = all(b < a for a, b in zip(values, values[1:]))
    gap = abs(values[-1] - limit) / limit
    return CheckPayload(
        "finite_p_convergence", limit, {"mse": dict(zip(map(str, sizes), values)), "relative_gap": gap},
        0.05 * scale, monotone and gap < 0.05 * scale,
        detail=None if monotone else "finite-P MSE is not decreasing in P",
    )


def CheckOrthogonality(sizes, covariances, scale):
    residuals = []
    for P in sizes:
        cov = covariances(P)
        half = FftPilot(P / 2, P=P)
        residuals.append(OrthogonalityResidual(cov, cov, half.values, model=CIRCULANT))
    P = sizes[-1]
    cov = covariances(P)
    aligned = ShiftOrthogonal(cov.samples, cov.samples, P // 2)
    same = OrthogonalityResidual(cov, cov, np.ones(P), model=CIRCULANT)
    overlapping = ShiftOrthogonal(cov.samples, cov.samples, 0)
    decreasing = all(b < a for a, b in zip(residuals, residuals[1:]))
    passed = decreasing and residuals[-1] < 1e-3 * scale and aligned and same > 1e-1 and not overlapping
    return CheckPayload(
        "orthogonality_decay", 1e-3,
        {"residuals": dict(zip(map(str, sizes), residuals)), "same_pilot": same, "shift_orthogonal": aligned},
        1e-3 * scale, passed,
    )


def CheckCapacity(F, P):
    users = Capacity(F)
    plan = PlanAlignment([F] * users, P=P)
    violations = CheckPlan(plan)
    integerPlan = PlanAlignment([F] * (P // math.ceil(2 * F * P)), P=P, integer=True)
    samples = BuildCovariance(DopplerSpectrum.clarke(F), P).samples
    # every pair of an integer plan differs by a whole number of bins
    differences = {int(round(b - a)) % P for a in integerPlan.shifts for b in integerPlan.shifts if a != b}
    pairwise = all(ShiftOrthogonal(samples, samples, d) for d in differences)
    target = int(math.floor(1.0 / (2.0 * F))) - 1
    passed = users >= target and not violations and pairwise
    return CheckPayload(
        "capacity_rule", target,
        {"users": users, "violations": len(violations), "integer_users": len(integerPlan.shifts), "integer_pairs_orthogonal": pairwise},
        0, passed,
    )


def CheckSynthesis(F, P, M, seeds, scale):
    cov = BuildCovariance(DopplerSpectrum.clarke(F), P)
    lags = np.arange(11)
    estimates = np.array([
        SampleAutocorrelation(SynthesizeRealization(cov, M, seed, method="toeplitz"), 10).real for seed in seeds
    ])
    mean = estimates.mean(axis=0)
    standardError = estimates.std(axis=0, ddof=1) / math.sqrt(len(seeds))
    target = ClarkeAutocorrelation(F, lags)
    score = float(np.max(np.abs(mean - target) / standardError))
    return CheckPayload("synthesis_autocorrelation", 0.0, score, 3.0 * scale, score < 3.0 * scale)


def CheckOrthogonalityPrinciple(config, draws, seed, scale):
    P = 32
    drawConfig = replace(config, array=replace(config.array, M=draws), users=config.users[:2])
    setup = BuildSetup(drawConfig, PSD_ALIGN, P, config.pilots.snr_db)
    y, channels = SimulateObservation(setup, np.random.default_rng(seed))
    estimate = MmseEstimates(y, setup.scene)[0]
    error = estimate - channels[0][:P]
    products = error[:, None, :] * np.conj(y)[None, :, :]
    mean = products.mean(axis=2)
    standardError = products.std(axis=2, ddof=1) / math.sqrt(draws)
    score = float(np.max(np.abs(mean) / standardError))
    return CheckPayload("mmse_orthogonality_principle", 0.0, score, 4.0 * scale, score < 4.0 * scale)


def _MonteCarloConfig(config):
    validation = config.validation
    return replace(
        config,
        array=replace(config.array, M=validation.M),
        run=replace(config.run, trials=validation.trials, P=validation.P),
    )


def CheckMonteCarlo(config, jobs, scale):
    """Interference-free equivalence of PSD alignment and its ordering against Hadamard pilots."""
    mcConfig = _MonteCarloConfig(config)
    aligned = RunDownlink(mcConfig, PSD_ALIGN, jobs=jobs)
    conventional = RunDownlink(mcConfig, HADAMARD, jobs=jobs)
    tolerance = 0.10 * scale
    againstAlone = np.abs(aligned.nmse - aligned.interference_free_nmse) / aligned.interference_free_nmse
    againstSmall = np.abs(aligned.nmse - aligned.analytic_nmse) / aligned.analytic_nmse
    equivalence = CheckPayload(
        "interference_free_equivalence",
        {"interference_free": aligned.interference_free_nmse.tolist(), "small_alpha": aligned.analytic_nmse.tolist()},
        {"nmse": aligned.nmse.tolist(), "worst_vs_alone": float(againstAlone.max()), "worst_vs_small_alpha": float(againstSmall.max())},
        tolerance,
        againstAlone.max() < tolerance and againstSmall.max() < tolerance,
    )
    alignedMse, conventionalMse = float(np.mean(aligned.nmse)), float(np.mean(conventional.nmse))
    mseSeparated = alignedMse + aligned.mean_nmse_halfwidth < conventionalMse - conventional.mean_nmse_halfwidth
    seSeparated = aligned.sum_se - aligned.sum_se_halfwidth > conventional.sum_se + conventional.sum_se_halfwidth
    ordering = CheckPayload(
        "baseline_ordering",
        "aligned nMSE below and sum SE above the Hadamard baseline, 95% intervals disjoint",
        {
            "nmse": {PSD_ALIGN: alignedMse, HADAMARD: conventionalMse},
            "sum_se": {PSD_ALIGN: aligned.sum_se, HADAMARD: conventional.sum_se},
        },
        None,
        mseSeparated and seSeparated,
    )
    return [equivalence, ordering]


def CheckDeterminism(config):
    small = replace(
        config,
        array=replace(config.array, M=4),
        run=replace(config.run, trials=3, P=256),
    )
    first = RunUplink(small, PSD_ALIGN, jobs=2)
    second = RunUplink(small, PSD_ALIGN, jobs=1)
    firstText = _CsvText("mse", AXIS_P, MseRows([first], AXIS_P))
    secondText = _CsvText("mse", AXIS_P, MseRows([second], AXIS_P))
    passed = first.seeds == second.seeds and firstText == secondText
    return CheckPayload("determinism", "identical", "identical" if passed else "different", None, passed)


def RunValidation(config, scale=1.0, jobs=1):
    """Every cross-check in order; returns the list of check payloads."""
    F = config.dopplers[0]
    snr = DbToLinear(config.pilots.snr_db)
    sizes = list(config.validation.convergence_P)
    cache = {}

    def covariances(P):
        if P not in cache:
            cache[P] = BuildCovariance(DopplerSpectrum.clarke(F), P)
        return cache[P]

    seeds = [config.run.seed + index for index in range(50)]
    checks = [
        lambda: CheckClosedForm(F, scale),
        lambda: CheckBoundary(scale),
        lambda: CheckTaylor(scale),
        lambda: CheckSmallAlpha(F, snr, scale),
        lambda: CheckConvergence(F, snr, sizes, covariances, scale),
        lambda: CheckOrthogonality(sizes, covariances, scale),
        lambda: CheckCapacity(F, config.validation.P),
        lambda: CheckSynthesis(F, 1024, 16, seeds, scale),
        lambda: CheckOrthogonalityPrinciple(config, config.validation.draws, config.run.seed, scale),
    ]
    if config.validation.run_monte_carlo:
        checks.append(lambda: CheckMonteCarlo(config, jobs, scale))
    checks.append(lambda: CheckDeterminism(config))

    payloads = []
    for check in checks:
        result = check()
        for payload in result if isinstance(result, list) else [result]:
            logger.info("%s: %s", payload["message"], "pass" if payload["status"] else "FAIL")
            payloads.append(payload)
    return payloads


def ReportText(payloads):
    lines = ["pilot-alignment validation report", ""]
    for payload in payloads:
        data = payload["data"]
        lines.append(f"[{'PASS' if payload['status'] else 'FAIL'}] {payload['message']}")
        lines.append(f"    target:    {json.dumps(data['target'], default=str)}")
        lines.append(f"    measured:  {json.dumps(data['measured'], default=str)}")
        lines.append(f"    tolerance: {json.dumps(data['tolerance'], default=str)}")
        if payload["error"]:
            lines.append(f"    error:     {payload['error']}")
    failed = [payload["message"] for payload in payloads if not payload["status"]]
    lines.append("")
    lines.append(f"{len(payloads) - len(failed)} of {len(payloads)} checks passed")
    if failed:
        lines.append("failed: " + ", ".join(failed))
    return "\n".join(lines) + "\n"
