import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from Cli.utils import ConfigError, LoadConfig, LoadPlan, WithPlan, WithSeed
from Estimation.utils import EstimationError
from Fading.utils import SpectrumError
from Pilots.utils import InfeasiblePlanError, PilotError
from Simkit.utils import ExperimentError, Sweep

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUN_FAILURE = 1


class SimulationCommand(BaseCommand):
    """Options every simulation command shares, and the config / output plumbing."""

    def add_arguments(self, parser):
        parser.add_argument("--config", default=None, help="experiment JSON file (default: SIMULATION_CONFIG)")
        parser.add_argument("--out", default=None, help="output directory (default: SIMULATION_OUTPUT_DIR)")
        parser.add_argument("--seed", type=int, default=None, help="master seed override (unsigned 64-bit)")
        parser.add_argument("--jobs", type=int, default=None, help="parallel trial workers (default: SIMULATION_JOBS)")

    def load(self, options):
        seed = options.get("seed")
        if seed is not None and not (0 <= seed < 2 ** 64):
            raise CommandError(f"--seed must be an unsigned 64-bit integer, got {seed}", returncode=USAGE_ERROR)
        try:
            config = LoadConfig(options.get("config"))
        except ConfigError as e:
            raise CommandError(str(e), returncode=USAGE_ERROR) from e
        return WithSeed(config, seed)

    def jobs(self, options):
        jobs = options.get("jobs") or settings.SIMULATION_JOBS
        if jobs < 1:
            raise CommandError("--jobs must be at least 1", returncode=USAGE_ERROR)
        return jobs

    def output_dir(self, options):
        outDir = Path(options.get("out") or settings.SIMULATION_OUTPUT_DIR)
        outDir.mkdir(parents=True, exist_ok=True)
        return outDir


class SweepCommand(SimulationCommand):
    """Runs Simkit.utils.Sweep over the configured axis; subclasses write the files."""
    downlink = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--plan", default=None, help="plan file written by the plan command")

    def write(self, outDir, config, results):
        raise NotImplementedError

    def handle(self, *args, **options):
        config = self.load(options)
        if not config.sweep.values:
            raise CommandError("the sweep axis has no values", returncode=USAGE_ERROR)
        if options.get("plan"):
            try:
                config = WithPlan(config, LoadPlan(options["plan"]))
            except ConfigError as e:
                raise CommandError(str(e), returncode=USAGE_ERROR) from e
        outDir = self.output_dir(options)

        try:
            results = Sweep(config, downlink=self.downlink, jobs=self.jobs(options))
        except InfeasiblePlanError as e:
            raise CommandError(f"alignment infeasible (width deficit {e.deficit:.6g}): {e}", returncode=RUN_FAILURE) from e
        except (EstimationError, PilotError, SpectrumError, ExperimentError) as e:
            logger.error("Sweep aborted: %s", e)
            raise CommandError(f"sweep aborted: {e}", returncode=RUN_FAILURE) from e

        for path in self.write(outDir, config, results):
            self.stdout.write(f"wrote {path}")
