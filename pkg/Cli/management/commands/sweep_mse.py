from Cli.utils import WriteManifest, WriteMseOutputs

from ._simulation import SweepCommand


class Command(SweepCommand):
    help = "Sweep both pilot schemes and write mse.csv, gain.csv and mse.dat"
    downlink = False

    def write(self, outDir, config, results):
        paths = WriteMseOutputs(outDir, results, config.sweep.axis)
        paths.append(WriteManifest(outDir, config, "sweep_mse", results))
        return paths
