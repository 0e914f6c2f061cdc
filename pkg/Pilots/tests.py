import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from Fading.utils import AutocorrelationSequence, BuildCovariance, ChannelCovariance, CirculantColumn, DopplerSpectrum

from .utils import (
    CIRCULANT,
    HADAMARD,
    AlignmentPlan,
    Capacity,
    CheckPlan,
    ConventionalPilots,
    CrossMatrix,
    FftPilot,
    HadamardPilots,
    InfeasiblePlanError,
    OrthogonalityResidual,
    StaggeredShifts,
    PilotError,
    PlanAlignment,
    ShiftOrthogonal,
)


def ConstantCovariance(P):
    r = AutocorrelationSequence(values=np.ones(P, dtype=complex), spectrum=None)
    eigenvalues = np.clip(np.fft.fft(CirculantColumn(r)).real, 0.0, None)
    return ChannelCovariance(P=P, autocorrelation=r, eigenvalues=eigenvalues)


class FftPilotTests(SimpleTestCase):
    def test_zero_shift_is_all_ones(self):
        np.testing.assert_allclose(FftPilot(0, P=8).values, np.ones(8))

    def test_half_shift_alternates(self):
        np.testing.assert_allclose(FftPilot(4, P=8).values, [1, -1, 1, -1, 1, -1, 1, -1], atol=1e-12)

    @given(st.integers(min_value=2, max_value=512), st.floats(min_value=0.0, max_value=1.0, exclude_max=True))
    @settings(max_examples=50, deadline=None)
    def test_unit_modulus(self, P, fraction):
        pilot = FftPilot(fraction * P, P=P)
        np.testing.assert_allclose(np.abs(pilot.values), 1.0, atol=1e-12)

    def test_custom_base(self):
        base = np.exp(1j * np.linspace(0, 3, 16))
        pilot = FftPilot(2, base=base)
        np.testing.assert_allclose(pilot.values / base, FftPilot(2, P=16).values)

    def test_invalid_inputs(self):
        with self.assertRaises(PilotError):
            FftPilot(8, P=8)
        with self.assertRaises(PilotError):
            FftPilot(-1, P=8)
        with self.assertRaises(PilotError):
            FftPilot(0, base=2 * np.ones(4))
        with self.assertRaises(PilotError):
            FftPilot(0)


class HadamardTests(SimpleTestCase):
    def test_sizes(self):
        for K in (1, 2, 8):
            rows = np.array([pilot.values for pilot in HadamardPilots(K)])
            np.testing.assert_allclose(rows @ rows.conj().T, K * np.eye(K))
            self.assertTrue(all(pilot.kind == HADAMARD for pilot in HadamardPilots(K)))

    def test_non_power_of_two_rejected(self):
        with self.assertRaises(PilotError):
            HadamardPilots(3)

    def test_conventional_block(self):
        for K, N in ((1, 2), (3, 4), (8, 8), (9, 16)):
            pilots = ConventionalPilots(K)
            self.assertEqual(len(pilots), K)
            self.assertTrue(all(pilot.P == N for pilot in pilots))
        rows = np.array([pilot.values for pilot in ConventionalPilots(3)])
        np.testing.assert_allclose(rows @ rows.conj().T, 4 * np.eye(3))
        with self.assertRaises(PilotError):
            ConventionalPilots(0)


class CrossMatrixTests(SimpleTestCase):
    def test_shift_gives_permutation(self):
        _, theta = CrossMatrix(FftPilot(0, P=8), FftPilot(3, P=8))
        expected = np.zeros(8)
        expected[3] = 1.0
        np.testing.assert_allclose(theta[:, 0], expected, atol=1e-12)

    def test_hadamard_cross_is_traceless(self):
        rows = HadamardPilots(8)
        Pkg, _ = CrossMatrix(rows[1], rows[2])
        self.assertAlmostEqual(abs(np.trace(Pkg)), 0.0)

    def test_length_mismatch(self):
        with self.assertRaises(PilotError):
            CrossMatrix(FftPilot(0, P=8), FftPilot(0, P=4))


class OrthogonalityTests(SimpleTestCase):
    def test_constant_channel_hadamard_pair_is_orthogonal(self):
        cov = ConstantCovariance(8)
        a, b = HadamardPilots(8)[1:3]
        Pkg, _ = CrossMatrix(a, b)
        self.assertAlmostEqual(OrthogonalityResidual(cov, cov, Pkg), 0.0, places=12)
        self.assertAlmostEqual(OrthogonalityResidual(cov.toeplitz, cov.toeplitz, Pkg), 0.0, places=12)

    def test_same_pilot_is_not_orthogonal(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.01), 64)
        self.assertGreater(OrthogonalityResidual(cov, cov, np.ones(64)), 0.1)

    def test_factor_path_matches_dense(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.02), 64)
        other = BuildCovariance(DopplerSpectrum.flat_band(-0.1, 0.05), 64)
        diagonal = FftPilot(16.5, P=64).values
        fast = OrthogonalityResidual(cov, other, diagonal)
        dense = OrthogonalityResidual(cov.toeplitz, other.toeplitz, np.diag(diagonal))
        self.assertAlmostEqual(fast, dense, delta=1e-6 * dense)

    def test_factor_path_with_weighted_diagonal(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.03), 48)
        other = BuildCovariance(DopplerSpectrum.flat_band(0.1, 0.2), 48)
        diagonal = np.linspace(0.2, 2.0, 48) * FftPilot(7.25, P=48).values
        fast = OrthogonalityResidual(cov, other, diagonal)
        dense = OrthogonalityResidual(cov.toeplitz, other.toeplitz, np.diag(diagonal))
        self.assertAlmostEqual(fast, dense, delta=1e-6 * dense)

    def test_circulant_eigenvalue_path_matches_dense(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.05), 32)
        diagonal = FftPilot(5, P=32).values
        fast = OrthogonalityResidual(cov, cov, diagonal, model=CIRCULANT)
        dense = OrthogonalityResidual(cov.circulant, cov.circulant, np.diag(diagonal))
        self.assertAlmostEqual(fast, dense, delta=1e-9)

    def test_half_shift_residual_decays(self):
        spectrum = DopplerSpectrum.clarke(0.002)
        residuals = []
        for P in (512, 1024, 2048, 4096):
            cov = BuildCovariance(spectrum, P)
            residuals.append(OrthogonalityResidual(cov, cov, FftPilot(P // 2, P=P).values, model=CIRCULANT))
        self.assertTrue(all(later < earlier for earlier, later in zip(residuals, residuals[1:])))
        self.assertLess(residuals[-1], 1e-3)

    def test_shift_orthogonal(self):
        cov = BuildCovariance(DopplerSpectrum.clarke(0.002), 1000)
        self.assertTrue(ShiftOrthogonal(cov.samples, cov.samples, 500))
        self.assertFalse(ShiftOrthogonal(cov.samples, cov.samples, 0))
        self.assertTrue(ShiftOrthogonal(np.zeros(1000), cov.samples, 0))

    def test_fractional_eigenvalue_shift_rejected(self):
        with self.assertRaises(PilotError):
            ShiftOrthogonal(np.ones(8), np.ones(8), 2.5)


class CapacityTests(SimpleTestCase):
    def test_capacity(self):
        self.assertEqual(Capacity(0.002), 250)
        self.assertEqual(Capacity(0.002, guard=1.0 / 4096), 235)
        self.assertEqual(Capacity(0.5), 1)

    def test_staggered_shifts(self):
        shifts = StaggeredShifts(8, 4096)
        self.assertAlmostEqual(shifts[0], 4096 * (3 / 8 + 1 / 36))
        self.assertAlmostEqual(shifts[7], 4096 * (3 / 8 + 8 / 36))


class PlanAlignmentTests(SimpleTestCase):
    def test_full_circle(self):
        plan = PlanAlignment([0.002] * 250, P=4096)
        self.assertEqual(len(plan.shifts), 250)
        self.assertEqual(CheckPlan(plan), [])

    def test_integer_plan_uses_whole_bins(self):
        plan = PlanAlignment([0.002] * 240, P=4096, integer=True)
        self.assertEqual(list(plan.shifts), [float(17 * k) for k in range(240)])
        with self.assertRaises(InfeasiblePlanError):
            PlanAlignment([0.002] * 241, P=4096, integer=True)

    def test_overload_reports_deficit(self):
        with self.assertRaises(InfeasiblePlanError) as raised:
            PlanAlignment([0.002] * 300, P=4096)
        self.assertAlmostEqual(raised.exception.deficit, 0.2, places=9)

    def test_single_user_keeps_zero_shift(self):
        plan = PlanAlignment([0.002], P=4096)
        self.assertAlmostEqual(plan.shifts[0], 0.0)

    def test_forbidden_band_avoided(self):
        band = (-0.375, 0.375)
        plan = PlanAlignment([0.002] * 8, forbidden=[band], P=4096)
        self.assertEqual(CheckPlan(plan), [])
        for centre in plan.centres:
            self.assertGreaterEqual(abs(centre), 0.375 + 0.002 - 1e-9)

    def test_guard_reduces_capacity(self):
        guard = 1.0 / 4096
        plan = PlanAlignment([0.002] * 235, P=4096, guard=guard)
        self.assertEqual(CheckPlan(plan), [])
        with self.assertRaises(InfeasiblePlanError):
            PlanAlignment([0.002] * 236, P=4096, guard=guard)

    @given(st.lists(st.floats(min_value=1e-3, max_value=0.1), min_size=1, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_feasible_loads_give_valid_plans(self, users):
        if sum(2 * F for F in users) > 1.0:
            with self.assertRaises(InfeasiblePlanError):
                PlanAlignment(users, P=1024)
            return
        plan = PlanAlignment(users, P=1024)
        self.assertEqual(CheckPlan(plan), [])
        self.assertTrue(all(0 <= tau < 1024 for tau in plan.shifts))

    def test_check_plan_flags_overlap(self):
        plan = AlignmentPlan(P=64, shifts=(0.0, 1.0), dopplers=(0.05, 0.05))
        self.assertEqual(len(CheckPlan(plan)), 1)

    def test_round_trip(self):
        plan = PlanAlignment([0.002, 0.011], forbidden=[(-0.375, 0.375)], P=4096, guard=0.001)
        self.assertEqual(AlignmentPlan.from_dict(plan.to_dict()), plan)

    def test_invalid_inputs(self):
        with self.assertRaises(PilotError):
            PlanAlignment([0.6], P=64)
        with self.assertRaises(PilotError):
            PlanAlignment([0.01], forbidden=[(0.2, 0.1)], P=64)
        self.assertEqual(PlanAlignment([], P=64).shifts, ())
