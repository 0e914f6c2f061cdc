from django.conf import settings
from django.core.management.base import CommandError

from Cli.utils import AtomicWrite, ReportText, RunValidation, WriteManifest
from Estimation.utils import EstimationError
from Fading.utils import SpectrumError
from Pilots.utils import PilotError
from Simkit.utils import ExperimentError

from ._simulation import RUN_FAILURE, USAGE_ERROR, SimulationCommand, logger


class Command(SimulationCommand):
    help = "Run the analytic and Monte-Carlo cross-checks and write report.txt"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--tolerance-scale", type=float, default=None,
            help="multiplies every tolerance (default: SIMULATION_TOLERANCE_SCALE)",
        )

    def handle(self, *args, **options):
        config = self.load(options)
        scale = options.get("tolerance_scale")
        scale = settings.SIMULATION_TOLERANCE_SCALE if scale is None else scale
        if scale <= 0:
            raise CommandError("--tolerance-scale must be positive", returncode=USAGE_ERROR)
        outDir = self.output_dir(options)

        try:
            payloads = RunValidation(config, scale=scale, jobs=self.jobs(options))
        except (EstimationError, PilotError, SpectrumError, ExperimentError) as e:
            logger.error("Validation aborted: %s", e)
            raise CommandError(f"validation aborted: {e}", returncode=RUN_FAILURE) from e

        report = ReportText(payloads)
        AtomicWrite(outDir / "report.txt", report)
        WriteManifest(outDir, config, "validate")
        self.stdout.write(report)

        failed = [payload["message"] for payload in payloads if not payload["status"]]
        if failed:
            raise CommandError(f"{len(failed)} checks failed: {', '.join(failed)}", returncode=RUN_FAILURE)
        self.stdout.write(self.style.SUCCESS("all checks passed"))
