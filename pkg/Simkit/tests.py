import math
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase, tag

from Estimation.utils import MmseEstimates
from Pilots.utils import PilotError

from .utils import (
    AXIS_SNR,
    EXPLICIT_SHIFTS,
    HADAMARD,
    PERFECT_CSI,
    PLANNED_SHIFTS,
    PSD_ALIGN,
    RANDOM_CSI,
    ArraySetup,
    BuildSetup,
    ConfidenceHalfWidth,
    ContaminationPeriodogram,
    ContaminationSetup,
    DownlinkRates,
    DownlinkSetup,
    ExperimentConfig,
    ExperimentError,
    PilotSetup,
    RunDownlink,
    RunSetup,
    RunUplink,
    SimulateObservation,
    Sweep,
    SweepPoints,
    SweepSetup,
    TrialSeeds,
    UserSetup,
    UserShifts,
)


def SmallConfig(K=2, P=64, M=4, trials=4, doppler_hz=10.0, contamination=True, **sections):
    config = ExperimentConfig(
        array=ArraySetup(M=M),
        users=tuple(UserSetup(doppler_hz=doppler_hz) for _ in range(K)),
        contamination=ContaminationSetup(enabled=contamination),
        run=RunSetup(P=P, trials=trials, seed=1234),
    )
    return replace(config, **sections)


class SeedTests(SimpleTestCase):
    def test_trial_seeds_are_deterministic_and_distinct(self):
        seeds = TrialSeeds(20240601, 50)
        self.assertEqual(seeds, TrialSeeds(20240601, 50))
        self.assertEqual(len(set(seeds)), 50)
        self.assertNotEqual(seeds, TrialSeeds(20240602, 50))
        with self.assertRaises(ExperimentError):
            TrialSeeds(1, 0)

    def test_confidence_half_width(self):
        values = np.random.default_rng(0).standard_normal(400)
        expected = 1.96 * values.std(ddof=1) / 20.0
        self.assertAlmostEqual(ConfidenceHalfWidth(values), expected)
        self.assertEqual(ConfidenceHalfWidth([1.0]), 0.0)


class SetupTests(SimpleTestCase):
    def test_staggered_shifts(self):
        config = SmallConfig(K=8, P=4096)
        shifts = UserShifts(config, 4096)
        self.assertAlmostEqual(shifts[0] / 4096, 3 / 8 + 1 / 36)
        self.assertAlmostEqual(shifts[7] / 4096, 3 / 8 + 8 / 36)

    def test_explicit_shifts(self):
        config = SmallConfig(
            K=2,
            users=(UserSetup(shift=0.25), UserSetup(shift=0.75)),
            pilots=PilotSetup(shift_mode=EXPLICIT_SHIFTS),
        )
        self.assertEqual(UserShifts(config, 64), [16.0, 48.0])
        missing = replace(config, users=(UserSetup(shift=0.25), UserSetup()))
        with self.assertRaises(ExperimentError):
            UserShifts(missing, 64)

    def test_planned_shifts_avoid_contamination(self):
        config = SmallConfig(K=4, pilots=PilotSetup(shift_mode=PLANNED_SHIFTS))
        for tau in UserShifts(config, 4096):
            centre = tau / 4096
            self.assertTrue(0.375 + 0.002 - 1e-9 <= centre <= 0.625 - 0.002 + 1e-9)

    def test_hadamard_sends_short_block(self):
        setup = BuildSetup(SmallConfig(K=3, P=68), HADAMARD, 68, 0.0)
        self.assertEqual((setup.P, setup.slots, setup.n), (68, 4, 5))
        y, channels = SimulateObservation(setup, np.random.default_rng(3))
        self.assertEqual(y.shape, (4, 4))
        self.assertEqual(channels[2].shape, (5, 4))

    def test_unplannable_shifts_raise(self):
        config = SmallConfig(K=300, pilots=PilotSetup(shift_mode=PLANNED_SHIFTS), contamination=False)
        with self.assertRaises(PilotError):
            BuildSetup(config, PSD_ALIGN, 4096, 0.0)

    def test_unknown_scheme(self):
        with self.assertRaises(ExperimentError):
            BuildSetup(SmallConfig(), "zadoff-chu", 64, 0.0)

    def test_setup_powers(self):
        config = SmallConfig(users=(UserSetup(power_db=0.0), UserSetup(power_db=10.0)))
        setup = BuildSetup(config, PSD_ALIGN, 64, 3.0)
        self.assertAlmostEqual(setup.scene.users[0].power, 10 ** 0.3)
        self.assertAlmostEqual(setup.scene.users[1].power, 10 ** 1.3)
        self.assertAlmostEqual(setup.contamination_power, 10 ** 0.3)
        self.assertEqual(setup.n, 65)

    def test_sweep_points(self):
        self.assertEqual(SweepPoints(SmallConfig(sweep=SweepSetup(values=(64, 128)))), [(64, 0.0), (128, 0.0)])
        snr = SmallConfig(sweep=SweepSetup(axis=AXIS_SNR, values=(-5, 5)))
        self.assertEqual(SweepPoints(snr), [(64, -5.0), (64, 5.0)])
        with self.assertRaises(ExperimentError):
            SweepPoints(SmallConfig(sweep=SweepSetup(values=())))


class ObservationTests(SimpleTestCase):
    def test_energy_accounting(self):
        config = SmallConfig(K=2, P=128, M=64)
        setup = BuildSetup(config, PSD_ALIGN, 128, 0.0)
        rng = np.random.default_rng(5)
        power = np.mean([np.mean(np.abs(SimulateObservation(setup, rng)[0]) ** 2) for _ in range(20)])
        expected = sum(user.power for user in setup.scene.users) + setup.contamination_power + 1.0
        self.assertAlmostEqual(power, expected, delta=0.05 * expected)

    def test_channels_cover_downlink_slot(self):
        config = SmallConfig(downlink=DownlinkSetup(lag=3))
        setup = BuildSetup(config, PSD_ALIGN, 64, 0.0)
        y, channels = SimulateObservation(setup, np.random.default_rng(0))
        self.assertEqual(y.shape, (64, 4))
        self.assertEqual(channels[0].shape, (67, 4))

    def test_contamination_periodogram_is_flat(self):
        P = 256
        config = SmallConfig(M=16)
        frequencies, periodogram = ContaminationPeriodogram(config, P, trials=200)
        interior = np.abs(frequencies) <= 0.375 - 8.0 / P
        outside = np.abs(frequencies) > 0.375 + 1.0 / P
        np.testing.assert_allclose(periodogram[interior], 4.0 / 3.0, rtol=0.10)
        self.assertLess(periodogram[outside].sum() / periodogram.sum(), 0.01)


class UplinkTests(SimpleTestCase):
    def test_replay_is_identical(self):
        config = SmallConfig(K=3, trials=6)
        first = RunUplink(config, jobs=1)
        second = RunUplink(config, jobs=3)
        np.testing.assert_array_equal(first.nmse, second.nmse)
        self.assertEqual(first.seeds, second.seeds)

    def test_result_summary(self):
        result = RunUplink(SmallConfig(trials=3))
        summary = result.summary()
        self.assertEqual(summary["trials"], 3)
        self.assertNotIn("sum_se", summary)
        self.assertEqual(len(result.nmse), 2)
        self.assertEqual(len(result.shifts), 2)

    def test_single_user_matches_matrix_formula(self):
        config = SmallConfig(K=1, P=512, M=16, trials=200, contamination=False)
        result = RunUplink(config)
        self.assertAlmostEqual(result.nmse[0], result.interference_free_nmse[0], delta=0.05 * result.interference_free_nmse[0])
        self.assertAlmostEqual(result.finite_nmse[0], result.interference_free_nmse[0], places=12)

    def test_reports_carry_empirical_figures(self):
        result = RunUplink(SmallConfig(K=2, trials=3))
        self.assertEqual(len(result.reports), 2)
        for k, report in enumerate(result.reports):
            self.assertEqual(report.empirical_nmse, float(result.nmse[k]))
            self.assertEqual(report.ci_halfwidth, float(result.nmse_halfwidth[k]))
            self.assertIsNotNone(report.asymptotic_mse)
        self.assertEqual(result.summary()["users"][1]["user"], 1)

    def test_silent_user(self):
        config = SmallConfig(users=(UserSetup(), UserSetup(power_db=-math.inf)), trials=3)
        result = RunUplink(config)
        self.assertEqual(result.analytic_nmse[1], 1.0)
        self.assertIsNone(result.gain_db[1])
        self.assertIsNone(result.analytic_gain_db[1])

    def test_hadamard_block_is_reported_at_sweep_point(self):
        config = SmallConfig(K=2, P=256, M=8, trials=20, contamination=False)
        aligned = RunUplink(config, PSD_ALIGN)
        conventional = RunUplink(config, HADAMARD)
        self.assertEqual((conventional.P, conventional.slots), (256, 2))
        self.assertEqual(aligned.slots, 256)
        self.assertGreater(np.mean(conventional.nmse), 5 * np.mean(aligned.nmse))

    def test_half_width_shrinks_with_trials(self):
        config = SmallConfig(K=2, P=256, M=32, trials=400, doppler_hz=100.0)
        seeds = TrialSeeds(config.run.seed, 400)
        wide = RunUplink(config, seeds=seeds[:100])
        narrow = RunUplink(config, seeds=seeds)
        ratio = wide.mean_nmse_halfwidth / narrow.mean_nmse_halfwidth
        self.assertAlmostEqual(ratio, 2.0, delta=0.3)

    def test_sweep_shares_seeds(self):
        config = SmallConfig(K=8, trials=2, sweep=SweepSetup(values=(64, 128)))
        results = Sweep(config)
        self.assertEqual([(r.scheme, r.P) for r in results], [(PSD_ALIGN, 64), (PSD_ALIGN, 128), (HADAMARD, 64), (HADAMARD, 128)])
        self.assertEqual(len({r.seeds for r in results}), 1)


class DownlinkTests(SimpleTestCase):
    def _MeanSinr(self, M, trials=200):
        config = SmallConfig(
            K=1, P=64, M=M, contamination=False,
            downlink=DownlinkSetup(lag=0, snr_db=0.0, csi=PERFECT_CSI),
        )
        setup = BuildSetup(config, PSD_ALIGN, 64, 0.0)
        rng = np.random.default_rng(M)
        sinr = []
        for _ in range(trials):
            y, channels = SimulateObservation(setup, rng)
            rates = DownlinkRates(setup, MmseEstimates(y, setup.scene), channels, rng)
            sinr.append(2.0 ** rates[0] - 1.0)
        return float(np.mean(sinr))

    def test_array_gain_doubles_with_antennas(self):
        gain = 10 * math.log10(self._MeanSinr(64) / self._MeanSinr(32))
        self.assertAlmostEqual(gain, 10 * math.log10(2), delta=0.5)

    def test_estimates_at_vanishing_snr_act_like_random_beams(self):
        base = SmallConfig(K=2, P=64, M=8, trials=200, pilots=PilotSetup(snr_db=-60.0), contamination=False)
        estimated = RunDownlink(replace(base, downlink=DownlinkSetup(snr_db=10.0)))
        random = RunDownlink(replace(base, downlink=DownlinkSetup(snr_db=10.0, csi=RANDOM_CSI)))
        spread = math.hypot(estimated.sum_se_halfwidth, random.sum_se_halfwidth) / 1.96
        self.assertLess(abs(estimated.sum_se - random.sum_se), 4 * spread)
        self.assertEqual(random.csi, RANDOM_CSI)

    def test_summary_has_rates(self):
        result = RunDownlink(SmallConfig(trials=3))
        self.assertGreater(result.sum_se, 0.0)
        self.assertIn("sum_se_halfwidth", result.summary())


@tag("slow")
class AcceptanceTests(SimpleTestCase):
    """Full-size scenario: 8 aligned users, P=4096, M=16, 200 trials."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        config = ExperimentConfig()
        cls.aligned = RunDownlink(config, PSD_ALIGN, jobs=4)
        cls.conventional = RunDownlink(config, HADAMARD, jobs=4)

    def test_aligned_users_match_interference_free_mse(self):
        gap = np.abs(self.aligned.nmse - self.aligned.interference_free_nmse) / self.aligned.interference_free_nmse
        self.assertLess(gap.max(), 0.10)

    def test_hadamard_baseline_is_worse(self):
        alignedMse = float(np.mean(self.aligned.nmse))
        conventionalMse = float(np.mean(self.conventional.nmse))
        self.assertLess(alignedMse + self.aligned.mean_nmse_halfwidth, conventionalMse - self.conventional.mean_nmse_halfwidth)
        self.assertGreater(
            self.aligned.sum_se - self.aligned.sum_se_halfwidth,
            self.conventional.sum_se + self.conventional.sum_se_halfwidth,
        )
