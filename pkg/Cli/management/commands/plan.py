from django.core.management.base import CommandError

from Cli.utils import ConfigPlan, PlanTable, WritePlan
from Pilots.utils import CheckPlan, InfeasiblePlanError, PilotError

from ._simulation import RUN_FAILURE, USAGE_ERROR, SimulationCommand, logger


class Command(SimulationCommand):
    help = "Plan (or check explicit) cyclic shifts for the configured users and write plan.json"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--P", type=int, default=None, help="pilot length (default: run.P of the config)")

    def handle(self, *args, **options):
        config = self.load(options)
        P = options.get("P") or config.run.P
        if P < 2:
            raise CommandError("--P must be at least 2", returncode=USAGE_ERROR)

        try:
            plan = ConfigPlan(config, P)
        except InfeasiblePlanError as e:
            self.stderr.write(f"infeasible: {e}")
            self.stderr.write(f"width deficit: {e.deficit:.6g}")
            raise CommandError(f"alignment infeasible, width deficit {e.deficit:.6g}", returncode=RUN_FAILURE) from e
        except PilotError as e:
            raise CommandError(str(e), returncode=USAGE_ERROR) from e

        self.stdout.write(PlanTable(plan))
        violations = CheckPlan(plan)
        if violations:
            for violation in violations:
                self.stderr.write(violation)
            raise CommandError(f"plan violates {len(violations)} separation constraints", returncode=RUN_FAILURE)

        path = WritePlan(self.output_dir(options) / "plan.json", plan)
        logger.info("Plan for %d users written to %s", len(plan.shifts), path)
        self.stdout.write(f"wrote {path}")
