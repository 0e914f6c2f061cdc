import json
import os
import tempfile
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from Fading.utils import BuildCovariance, DopplerSpectrum
from Pilots.utils import AlignmentPlan
from Simkit.utils import HADAMARD, PSD_ALIGN

from .utils import (
    CSV_COLUMNS,
    AtomicWrite,
    CheckBoundary,
    CheckCapacity,
    CheckClosedForm,
    CheckConvergence,
    CheckDeterminism,
    CheckMonteCarlo,
    CheckOrthogonality,
    CheckOrthogonalityPrinciple,
    CheckSmallAlpha,
    CheckSynthesis,
    CheckTaylor,
    ConfigError,
    DumpConfig,
    LoadConfig,
    ParseConfig,
    ReportText,
)


def Users(count, doppler_hz=10.0, **extra):
    return [dict(doppler_hz=doppler_hz, **extra) for _ in range(count)]


def SmallExperiment(**overrides):
    data = {
        "array": {"M": 2},
        "users": Users(8),
        "sweep": {"axis": "P", "values": [64, 128]},
        "run": {"P": 128, "trials": 2, "seed": 77},
    }
    data.update(overrides)
    return data


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        workspace = tempfile.TemporaryDirectory()
        self.addCleanup(workspace.cleanup)
        self.workspace = Path(workspace.name)

    def config_file(self, data, name="config.json"):
        path = self.workspace / name
        path.write_text(data if isinstance(data, str) else json.dumps(data))
        return str(path)

    def run_command(self, name, *args, **options):
        stdout, stderr = StringIO(), StringIO()
        call_command(name, *args, stdout=stdout, stderr=stderr, **options)
        return stdout.getvalue(), stderr.getvalue()


class ConfigTests(CommandTestCase):
    def test_shipped_config_round_trip(self):
        config = LoadConfig(settings.BASE_DIR / "configs" / "default.json")
        self.assertEqual(config.K, 8)
        self.assertAlmostEqual(config.dopplers[0], 0.002)
        self.assertEqual(ParseConfig(json.loads(json.dumps(DumpConfig(config)))), config)

    def test_missing_sections_take_defaults(self):
        config = ParseConfig({"users": Users(2)})
        self.assertEqual(config.run.P, 4096)
        self.assertEqual(config.contamination.band, (-0.375, 0.375))
        self.assertEqual(config.pilots.schemes, ("psdalign", "hadamard"))
        self.assertEqual(config.sweep.values, (512.0, 1024.0, 2048.0, 4096.0))

    def test_doppler_above_half_rejected(self):
        with self.assertRaisesRegex(ConfigError, "exceeds 1/2"):
            ParseConfig({"users": Users(1, doppler_hz=3000.0)})

    def test_invalid_fields_rejected(self):
        for data in (
            {"users": []},
            {"users": Users(1), "contamination": {"band": [0.2, 0.1]}},
            {"users": Users(1), "run": {"seed": -1}},
            {"users": Users(1), "sweep": {"values": [100.5]}},
            {"users": Users(1), "pilots": {"shift_mode": "explicit"}},
        ):
            with self.subTest(data=data), self.assertRaises(ConfigError):
                ParseConfig(data)

    def test_explicit_shifts_accepted(self):
        users = [{"doppler_hz": 10.0, "shift": 3 / 8 + k / 36} for k in range(1, 9)]
        config = ParseConfig({"users": users, "pilots": {"shift_mode": "explicit"}})
        self.assertAlmostEqual(config.users[0].shift, 3 / 8 + 1 / 36)

    def test_numerology_mismatch_only_warns(self):
        with self.assertLogs("Cli.serializers", level="WARNING"):
            config = ParseConfig({"users": Users(1), "numerology": {"sampling_hz": 4000.0, "symbol_duration": 66.67e-6}})
        self.assertEqual(config.numerology.sampling_hz, 4000.0)

    def test_malformed_json_reports_position(self):
        path = self.config_file('{"users": [\n  {"doppler_hz": 10.0,}\n]}')
        with self.assertRaisesRegex(ConfigError, "line 2"):
            LoadConfig(path)


class AtomicWriteTests(CommandTestCase):
    def test_leaves_only_the_target(self):
        target = self.workspace / "nested" / "out.txt"
        AtomicWrite(target, "first\n")
        AtomicWrite(target, "second\n")
        self.assertEqual(target.read_text(), "second\n")
        self.assertEqual(os.listdir(target.parent), ["out.txt"])


class PlanCommandTests(CommandTestCase):
    def test_single_user_keeps_zero_shift(self):
        path = self.config_file({"users": Users(1), "contamination": {"enabled": False}})
        stdout, _ = self.run_command("plan", config=path, out=str(self.workspace))
        plan = AlignmentPlan.from_dict(json.loads((self.workspace / "plan.json").read_text()))
        self.assertEqual(plan.shifts, (0.0,))
        self.assertIn("margin", stdout)

    def test_overload_exits_with_deficit(self):
        path = self.config_file({"users": Users(300), "contamination": {"enabled": False}})
        with self.assertRaises(CommandError) as raised:
            self.run_command("plan", config=path, out=str(self.workspace))
        self.assertEqual(raised.exception.returncode, 1)
        self.assertIn("deficit", str(raised.exception))
        self.assertFalse((self.workspace / "plan.json").exists())

    def test_explicit_shifts_are_checked(self):
        users = [{"doppler_hz": 10.0, "shift": 3 / 8 + k / 36} for k in range(1, 9)]
        path = self.config_file({"users": users, "pilots": {"shift_mode": "explicit"}})
        self.run_command("plan", config=path, out=str(self.workspace), P=4096)
        plan = json.loads((self.workspace / "plan.json").read_text())
        self.assertAlmostEqual(plan["shifts"][0], 4096 * (3 / 8 + 1 / 36))

    def test_explicit_overlap_exits_one(self):
        users = [{"doppler_hz": 10.0, "shift": 0.0}, {"doppler_hz": 10.0, "shift": 0.001}]
        path = self.config_file({"users": users, "pilots": {"shift_mode": "explicit"}, "contamination": {"enabled": False}})
        with self.assertRaises(CommandError) as raised:
            self.run_command("plan", config=path, out=str(self.workspace))
        self.assertEqual(raised.exception.returncode, 1)

    def test_bad_config_is_usage_error(self):
        path = self.config_file({"users": Users(1, doppler_hz=3000.0)})
        with self.assertRaises(CommandError) as raised:
            self.run_command("plan", config=path, out=str(self.workspace))
        self.assertEqual(raised.exception.returncode, 2)


class SweepCommandTests(CommandTestCase):
    def read_rows(self, path):
        lines = path.read_text().splitlines()
        self.assertTrue(lines[0].startswith("# pilot-alignment"))
        self.assertEqual(lines[1], ",".join(CSV_COLUMNS))
        return lines[2:]

    def test_mse_sweep_outputs(self):
        path = self.config_file(SmallExperiment())
        out = self.workspace / "mse"
        self.run_command("sweep_mse", config=path, out=str(out))
        self.assertEqual(len(self.read_rows(out / "mse.csv")), 2 * 2 * 8)
        self.assertEqual(len(self.read_rows(out / "gain.csv")), 2 * 2 * 8)
        blocks = (out / "mse.dat").read_text().split("\n\n\n")
        self.assertEqual(len(blocks), 2)
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["master_seed"], 77)
        self.assertEqual(len(manifest["runs"]), 4)
        self.assertEqual(len(manifest["runs"][0]["seeds"]), 2)

    def test_replay_is_byte_identical(self):
        path = self.config_file(SmallExperiment())
        first, second, other = (self.workspace / name for name in ("first", "second", "other"))
        self.run_command("sweep_mse", config=path, out=str(first))
        seed = json.loads((first / "manifest.json").read_text())["master_seed"]
        self.run_command("sweep_mse", config=path, out=str(second), seed=seed, jobs=2)
        self.run_command("sweep_mse", config=path, out=str(other), seed=seed + 1)
        self.assertEqual((first / "mse.csv").read_bytes(), (second / "mse.csv").read_bytes())
        self.assertEqual((first / "manifest.json").read_bytes(), (second / "manifest.json").read_bytes())
        self.assertNotEqual((first / "mse.csv").read_bytes(), (other / "mse.csv").read_bytes())

    def test_downlink_sweep_outputs(self):
        path = self.config_file(SmallExperiment())
        out = self.workspace / "dl"
        self.run_command("sweep_dl", config=path, out=str(out))
        rows = self.read_rows(out / "dlse.csv")
        self.assertEqual(len(rows), 2 * 2)
        self.assertTrue(all(row.split(",")[2] == "sum" for row in rows))
        self.assertTrue((out / "dlse.dat").exists())

    def test_sweep_with_stored_plan(self):
        path = self.config_file(SmallExperiment(pilots={"schemes": ["psdalign"], "shift_mode": "plan"}))
        self.run_command("plan", config=path, out=str(self.workspace))
        out = self.workspace / "planned"
        self.run_command("sweep_mse", config=path, out=str(out), plan=str(self.workspace / "plan.json"))
        self.assertEqual(len(self.read_rows(out / "mse.csv")), 2 * 8)

    def test_empty_sweep_is_usage_error(self):
        path = self.config_file(SmallExperiment(sweep={"values": []}))
        with self.assertRaises(CommandError) as raised:
            self.run_command("sweep_mse", config=path, out=str(self.workspace))
        self.assertEqual(raised.exception.returncode, 2)

    def test_seed_out_of_range(self):
        path = self.config_file(SmallExperiment())
        with self.assertRaises(CommandError) as raised:
            self.run_command("sweep_mse", config=path, out=str(self.workspace), seed=-5)
        self.assertEqual(raised.exception.returncode, 2)


class ValidationTests(CommandTestCase):
    def test_analytic_checks_pass(self):
        for payload in (CheckClosedForm(0.002, 1.0), CheckBoundary(1.0), CheckTaylor(1.0), CheckSmallAlpha(0.002, 1.0, 1.0)):
            with self.subTest(check=payload["message"]):
                self.assertTrue(payload["status"], payload["error"])
                self.assertIsNone(payload["error"])

    def test_report_lists_failures(self):
        payloads = [CheckBoundary(1.0), CheckTaylor(1e-6)]
        report = ReportText(payloads)
        self.assertIn("[PASS] boundary_value", report)
        self.assertIn("[FAIL] taylor_residual", report)
        self.assertIn("1 of 2 checks passed", report)

    def test_tightened_tolerance_fails(self):
        data = SmallExperiment(
            users=Users(1),
            run={"P": 256, "trials": 3, "seed": 5},
            validation={"P": 256, "M": 4, "trials": 3, "draws": 200, "convergence_P": [64, 128], "run_monte_carlo": False},
        )
        path = self.config_file(data)
        out = self.workspace / "validate"
        with self.assertRaises(CommandError) as raised:
            self.run_command("validate", config=path, out=str(out), tolerance_scale=0.01)
        self.assertEqual(raised.exception.returncode, 1)
        report = (out / "report.txt").read_text()
        self.assertIn("[FAIL] synthesis_autocorrelation", report)
        self.assertTrue((out / "manifest.json").exists())

    def test_non_positive_scale_is_usage_error(self):
        path = self.config_file(SmallExperiment())
        with self.assertRaises(CommandError) as raised:
            self.run_command("validate", config=path, out=str(self.workspace), tolerance_scale=0.0)
        self.assertEqual(raised.exception.returncode, 2)

    def test_all_checks_pass_on_a_small_scene(self):
        data = SmallExperiment(
            users=Users(2),
            validation={"P": 1024, "M": 32, "trials": 40, "draws": 500, "convergence_P": [512, 1024, 2048]},
        )
        path = self.config_file(data)
        out = self.workspace / "validate"
        stdout, _ = self.run_command("validate", config=path, out=str(out), tolerance_scale=50.0, jobs=2)
        self.assertIn("all checks passed", stdout)
        report = (out / "report.txt").read_text()
        self.assertNotIn("[FAIL]", report)
        self.assertIn("[PASS] baseline_ordering", report)
        self.assertIn("[PASS] determinism", report)


def ClarkeCovariances(F):
    cache = {}

    def covariances(P):
        if P not in cache:
            cache[P] = BuildCovariance(DopplerSpectrum.clarke(F), P)
        return cache[P]

    return covariances


class ValidationCheckTests(SimpleTestCase):
    def test_capacity_rule(self):
        payload = CheckCapacity(0.002, 1024)
        self.assertTrue(payload["status"], payload["error"])
        self.assertEqual(payload["data"]["measured"]["users"], 250)
        self.assertTrue(payload["data"]["measured"]["integer_pairs_orthogonal"])

    def test_convergence_reports_the_gap(self):
        covariances = ClarkeCovariances(0.05)
        loose = CheckConvergence(0.05, 1.0, [64, 128, 256], covariances, 20.0)
        self.assertTrue(loose["status"], loose["error"])
        mse = list(loose["data"]["measured"]["mse"].values())
        self.assertTrue(all(b < a for a, b in zip(mse, mse[1:])))
        self.assertGreater(mse[-1], loose["data"]["target"])
        tight = CheckConvergence(0.05, 1.0, [64, 128, 256], covariances, 1e-6)
        self.assertFalse(tight["status"])
        self.assertIn("outside tolerance", tight["error"])

    def test_orthogonality_decay(self):
        payload = CheckOrthogonality([512, 1024, 2048, 4096], ClarkeCovariances(0.002), 1.0)
        self.assertTrue(payload["status"], payload["error"])
        self.assertGreater(payload["data"]["measured"]["same_pilot"], 0.1)

    def test_synthesis_matches_clarke(self):
        payload = CheckSynthesis(0.002, 1024, 16, list(range(50)), 1.5)
        self.assertTrue(payload["status"], payload["error"])

    def test_orthogonality_principle(self):
        config = ParseConfig(SmallExperiment(users=Users(2)))
        payload = CheckOrthogonalityPrinciple(config, 2000, 11, 1.0)
        self.assertTrue(payload["status"], payload["error"])

    def test_monte_carlo_equivalence_and_ordering(self):
        config = ParseConfig(SmallExperiment(users=Users(2), validation={"P": 1024, "M": 32, "trials": 40}))
        equivalence, ordering = CheckMonteCarlo(config, 2, 50.0)
        self.assertTrue(equivalence["status"], equivalence["error"])
        self.assertTrue(ordering["status"], ordering["error"])
        nmse = ordering["data"]["measured"]["nmse"]
        sumSe = ordering["data"]["measured"]["sum_se"]
        self.assertLess(nmse[PSD_ALIGN], nmse[HADAMARD])
        self.assertGreater(sumSe[PSD_ALIGN], sumSe[HADAMARD])

    def test_determinism(self):
        payload = CheckDeterminism(ParseConfig(SmallExperiment(users=Users(2))))
        self.assertTrue(payload["status"], payload["error"])
