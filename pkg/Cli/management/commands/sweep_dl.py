from Cli.utils import WriteDlOutputs, WriteManifest

from ._simulation import SweepCommand


class Command(SweepCommand):
    help = "Sweep both pilot schemes through the downlink and write dlse.csv and dlse.dat"
    downlink = True

    def write(self, outDir, config, results):
        paths = WriteDlOutputs(outDir, results, config.sweep.axis)
        paths.append(WriteManifest(outDir, config, "sweep_dl", results))
        return paths
