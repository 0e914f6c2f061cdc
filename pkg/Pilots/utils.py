"""
Pilot sequences (conventional Hadamard and FFT cyclic-shift), the pairwise
orthogonality measures, and the cyclic-shift planner that keeps the shifted
Doppler supports of users apart from each other and from known interference.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from Fading.utils import WrapFrequency

logger = logging.getLogger(__name__)

FFT = "fft"
HADAMARD = "hadamard"

TOEPLITZ = "toeplitz"
CIRCULANT = "circulant"

UNIT_MODULUS_TOLERANCE = 1e-9
SUPPORT_FLOOR = 1e-10
# slack for touching arcs and float round-off in the planner
ARC_TOLERANCE = 1e-9


class PilotError(ValueError):
    pass


class InfeasiblePlanError(PilotError):
    def __init__(self, message, deficit):
        super().__init__(message)
        self.deficit = deficit


@dataclass(frozen=True, eq=False)
class PilotSequence:
    values: np.ndarray
    kind: str = FFT
    tau: float = None
    base: np.ndarray = None

    @property
    def P(self):
        return self.values.size


def _CheckUnitModulus(values, what):
    deviation = np.max(np.abs(np.abs(values) - 1.0)) if values.size else 0.0
    if deviation > UNIT_MODULUS_TOLERANCE:
        raise PilotError(f"{what} must have unit modulus (max deviation {deviation:.3g})")


def FftPilot(tau, base=None, P=None):
    """
    Cyclic-shift pilot x(n) = exp(j 2 pi tau n / P) s0(n).

    The shift may be fractional; the base defaults to the all-ones sequence.
    """
    if base is None:
        if P is None:
            raise PilotError("either a base sequence or the length P is needed")
        base = np.ones(P, dtype=complex)
    base = np.asarray(base, dtype=complex)
    if P is None:
        P = base.size
    if base.size != P:
        raise PilotError(f"base sequence has length {base.size}, expected {P}")
    _CheckUnitModulus(base, "base sequence")
    if not (0 <= tau < P):
        raise PilotError(f"cyclic shift must satisfy 0 <= tau < P, got {tau}")
    n = np.arange(P)
    values = np.exp(2j * np.pi * tau * n / P) * base
    return PilotSequence(values=values, kind=FFT, tau=float(tau), base=base)


def _IsPowerOfTwo(K):
    return isinstance(K, (int, np.integer)) and K >= 1 and (K & (K - 1)) == 0


def HadamardPilots(K):
    """Rows of the K x K Sylvester Hadamard matrix as pilots of length K."""
    if not _IsPowerOfTwo(K):
        raise PilotError(f"Hadamard pilots need K to be a power of two, got {K}")
    rows = scipy.linalg.hadamard(K).astype(complex)
    return [PilotSequence(values=row, kind=HADAMARD) for row in rows]


def ConventionalPilots(K):
    """
    First K rows of the N x N Hadamard matrix, N the smallest power of two
    >= max(K, 2). The block is N slots long whatever P the aligned scheme uses.
    """
    if K < 1:
        raise PilotError(f"need at least one user, got {K}")
    N = max(1 << (K - 1).bit_length(), 2)
    return HadamardPilots(N)[:K]


def CrossMatrix(a, b):
    """
    P_ab = X_a^H X_b and its DFT conjugation Theta_ab = F P_ab F^H.

    Theta is circulant with first column fft(diag P_ab)/P, so for FFT pilots
    over one base it is the permutation moving index p to p + (tau_b - tau_a).
    """
    if a.P != b.P:
        raise PilotError(f"pilot lengths differ ({a.P} vs {b.P})")
    diagonal = np.conj(a.values) * b.values
    theta = scipy.linalg.circulant(np.fft.fft(diagonal) / a.P)
    return np.diag(diagonal), theta


def _AsMatrix(covariance, model):
    if not hasattr(type(covariance), "toeplitz"):
        return np.asarray(covariance)
    return covariance.circulant if model == CIRCULANT else covariance.toeplitz


def _CyclicShift(diagonal):
    # whole-bin shift s when diag(P_kg) is exp(j 2 pi s n / P), else None
    theta = np.fft.fft(diagonal) / diagonal.size
    peak = int(np.argmax(np.abs(theta)))
    if abs(abs(theta[peak]) - 1.0) > UNIT_MODULUS_TOLERANCE:
        return None
    return peak


def OrthogonalityResidual(Rk, Rg, Pkg, model=TOEPLITZ):
    """
    Normalized Frobenius norm ||R_k P_kg R_g P_kg^H||_F / P.

    Covariances may be explicit matrices or ChannelCovariance objects, in which
    case `model` picks the exact Toeplitz matrices or their circulant
    approximations. With a diagonal P_kg the Toeplitz norm is taken through the
    low-rank factors, and the circulant norm of a cyclic shift through the
    eigenvalues.
    """
    Pkg = np.asarray(Pkg)
    diagonal = Pkg if Pkg.ndim == 1 else None
    if diagonal is None and np.count_nonzero(Pkg - np.diag(np.diag(Pkg))) == 0:
        diagonal = np.diag(Pkg)
    isCovariance = hasattr(type(Rk), "factor") and hasattr(type(Rg), "factor")
    if diagonal is not None and isCovariance and model == CIRCULANT:
        shift = _CyclicShift(diagonal)
        if shift is not None:
            product = Rk.eigenvalues * np.roll(Rg.eigenvalues, shift)
            return float(np.linalg.norm(product) / Rk.P)
    if diagonal is not None and isCovariance and model == TOEPLITZ:
        Lk, Lg = Rk.factor, Rg.factor
        B = diagonal[:, None] * Lg
        M = Lk.conj().T @ B
        Gk = Lk.conj().T @ Lk
        Gg = B.conj().T @ B
        squared = np.real(np.trace(Gk @ M @ Gg @ M.conj().T))
        return math.sqrt(max(squared, 0.0)) / Lk.shape[0]
    Rk, Rg = _AsMatrix(Rk, model), _AsMatrix(Rg, model)
    if diagonal is not None:
        product = Rk @ (diagonal[:, None] * Rg * np.conj(diagonal)[None, :])
    else:
        product = Rk @ Pkg @ Rg @ Pkg.conj().T
    return float(np.linalg.norm(product, "fro") / Rk.shape[0])


def _Support(eigenvalues):
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    peak = eigenvalues.max() if eigenvalues.size else 0.0
    if peak <= 0:
        return np.zeros(eigenvalues.shape, dtype=bool)
    return eigenvalues > SUPPORT_FLOOR * peak


def ShiftOrthogonal(lambdaK, lambdaG, deltaTau):
    """True when lambda_k(p) lambda_g(p - deltaTau) vanishes for every p."""
    lambdaK = np.asarray(lambdaK)
    lambdaG = np.asarray(lambdaG)
    if lambdaK.shape != lambdaG.shape:
        raise PilotError("eigenvalue vectors must have equal length")
    shift = int(round(deltaTau))
    if abs(deltaTau - shift) > ARC_TOLERANCE:
        raise PilotError(f"eigenvalue shifts must be whole bins, got {deltaTau}")
    overlap = _Support(lambdaK) & np.roll(_Support(lambdaG), shift)
    return not bool(overlap.any())


def StaggeredShifts(K, P, offset=3 / 8, spacing=1 / 36):
    """tau_k = P ((offset + k spacing) mod 1) for k = 1..K."""
    return [P * ((offset + k * spacing) % 1.0) for k in range(1, K + 1)]


def Capacity(F, guard=0.0):
    """Users of normalized Doppler F that fit on the frequency circle."""
    return int(math.floor(1.0 / (2.0 * F + guard) + ARC_TOLERANCE))


@dataclass(frozen=True)
class AlignmentPlan:
    P: int
    shifts: tuple
    dopplers: tuple
    forbidden: tuple = field(default_factory=tuple)
    guard: float = 0.0
    integer: bool = False

    @property
    def centres(self):
        return [WrapFrequency(tau / self.P) for tau in self.shifts]

    def to_dict(self):
        return {
            "P": self.P,
            "shifts": list(self.shifts),
            "dopplers": list(self.dopplers),
            "forbidden": [list(band) for band in self.forbidden],
            "guard": self.guard,
            "integer": self.integer,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            P=int(data["P"]),
            shifts=tuple(float(tau) for tau in data["shifts"]),
            dopplers=tuple(float(F) for F in data["dopplers"]),
            forbidden=tuple(tuple(float(edge) for edge in band) for band in data.get("forbidden", [])),
            guard=float(data.get("guard", 0.0)),
            integer=bool(data.get("integer", False)),
        )


def _ArcGap(centreA, halfA, centreB, halfB):
    # free space between two arcs on the unit circle (negative when they overlap)
    distance = abs(WrapFrequency(centreA - centreB))
    return distance - halfA - halfB


def CheckPlan(plan):
    """Violations of the plan invariants; an empty list means the plan is valid."""
    violations = []
    centres = plan.centres
    for k in range(len(centres)):
        for g in range(k + 1, len(centres)):
            gap = _ArcGap(centres[k], plan.dopplers[k], centres[g], plan.dopplers[g])
            if gap < plan.guard - ARC_TOLERANCE:
                violations.append(f"users {k} and {g}: support gap {gap:.6g} below guard {plan.guard:.6g}")
        for lo, hi in plan.forbidden:
            gap = _ArcGap(centres[k], plan.dopplers[k], (lo + hi) / 2.0, (hi - lo) / 2.0)
            if gap < plan.guard - ARC_TOLERANCE:
                violations.append(f"user {k}: support meets forbidden band [{lo:.6g}, {hi:.6g}]")
    return violations


def _MergeBands(forbidden):
    arcs = sorted((float(lo), float(hi)) for lo, hi in forbidden)
    merged = []
    for lo, hi in arcs:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def PlanAlignment(users, forbidden=(), P=2, guard=0.0, integer=False):
    """
    First-fit greedy packing of the shifted Doppler supports on the circle.

    Users are placed in increasing-F order, each support [c - F, c + F] starting
    right after the previous one (plus `guard`) and skipping forbidden bands.
    With `integer` every shift is rounded up to a whole DFT bin.
    """
    if P < 2:
        raise PilotError("P must be at least 2")
    users = [float(F) for F in users]
    for F in users:
        if not (0.0 < F <= 0.5):
            raise PilotError(f"normalized Doppler must satisfy 0 < F <= 1/2, got {F}")
    forbidden = tuple((float(lo), float(hi)) for lo, hi in forbidden)
    for lo, hi in forbidden:
        if not (-0.5 <= lo < hi <= 0.5):
            raise PilotError(f"forbidden band [{lo}, {hi}] is not inside (-1/2, 1/2]")
    if not users:
        return AlignmentPlan(P=P, shifts=(), dopplers=(), forbidden=forbidden, guard=guard, integer=integer)

    bands = _MergeBands(forbidden)
    blockedWidth = sum(hi - lo for lo, hi in bands)
    demanded = sum(2.0 * F + guard for F in users)
    available = 1.0 - blockedWidth
    if demanded > available + ARC_TOLERANCE:
        raise InfeasiblePlanError(
            f"{len(users)} users need width {demanded:.6g} but only {available:.6g} is free",
            deficit=demanded - available,
        )

    order = sorted(range(len(users)), key=lambda k: users[k])
    if bands:
        origin = bands[0][1] + guard
        blocked = []
        for lo, hi in bands:
            shift = math.ceil(origin - hi - ARC_TOLERANCE)
            blocked.append((lo + shift - guard, hi + shift + guard))
            blocked.append((lo + shift + 1 - guard, hi + shift + 1 + guard))
        limit = origin + 1.0
        endGap = 0.0
    else:
        origin = -users[order[0]]
        blocked = []
        limit = origin + 1.0
        endGap = guard

    centres = [None] * len(users)
    cursor = origin
    for position, k in enumerate(order):
        F = users[k]
        while True:
            centre = cursor + F
            if integer:
                centre = math.ceil(centre * P - ARC_TOLERANCE) / P
            lo, hi = centre - F, centre + F
            clash = [b for b in blocked if lo < b[1] - ARC_TOLERANCE and hi > b[0] + ARC_TOLERANCE]
            if not clash:
                break
            cursor = max(b[1] for b in clash)
        if hi + endGap > limit + ARC_TOLERANCE:
            overflow = hi + endGap - limit
            deficit = overflow + sum(2.0 * users[j] + guard for j in order[position + 1:])
            logger.warning("Alignment infeasible after %d of %d users", position, len(users))
            raise InfeasiblePlanError(
                f"only {position} of {len(users)} users fit on the frequency circle",
                deficit=deficit,
            )
        centres[k] = centre
        cursor = hi + guard

    shifts = tuple(((centre % 1.0) * P) % P for centre in centres)
    if integer:
        shifts = tuple(float(round(tau) % P) for tau in shifts)
    plan = AlignmentPlan(P=P, shifts=shifts, dopplers=tuple(users), forbidden=forbidden, guard=guard, integer=integer)
    violations = CheckPlan(plan)
    if violations:
        raise InfeasiblePlanError("; ".join(violations), deficit=0.0)
    logger.info("Planned %d users on P=%d (guard %.3g)", len(users), P, guard)
    return plan
