import argparse
import logging
from typing import Dict, List, Optional

from config import OUTPUT_FORMATS
from dataset.common_utils import JobConfig, load_config_file
from services.design_service import Variant
from services.errors import ClusterRobustError
from services.variance_service import STORAGE_MODES
from command import CommandProcessor, HELP_TEXT, get_command_list
from command.utils import KAPPA_NORM_MODES

logger = logging.getLogger(__name__)


class ClusterRobustCLI:
    def __init__(self):
        self.command_processor = CommandProcessor()
        self.parser = argparse.ArgumentParser(
            prog="cluster-robust",
            description="Cluster-robust inference for linear models with many controls.",
            epilog=HELP_TEXT,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        self.setup_handlers()

    @staticmethod
    def _add_common(sub: argparse.ArgumentParser):
        sub.add_argument("--config", help="JSON or key = value file; flags override it")
        sub.add_argument("--format", choices=OUTPUT_FORMATS)
        sub.add_argument("--output", help="write the report here instead of stdout")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--alpha", type=float)
        sub.add_argument("--estimators", help="comma list of unf, lz, cr")
        sub.add_argument("--solver-mode", choices=STORAGE_MODES)
        sub.add_argument("--tol", type=float, help="relative residual tolerance of the CG solver")
        sub.add_argument("--max-iter", type=int)
        sub.add_argument("--collapsed", action="store_true", default=None, help="solve on unordered pairs")
        sub.add_argument("--ma-lag", type=int, help="keep within-cluster pairs at most this far apart")
        sub.add_argument("--kappa-norm", choices=KAPPA_NORM_MODES, help="also report ||kappa||_inf")

    @staticmethod
    def _add_data(sub: argparse.ArgumentParser):
        sub.add_argument("--input", help="CSV file with a header row")
        sub.add_argument("--y")
        sub.add_argument("--x", help="comma list of regressors of interest")
        sub.add_argument("--w", help="comma list of controls")
        sub.add_argument("--cluster", help="cluster id column; omitted means singleton clusters")
        sub.add_argument("--absorb", help="comma list of categorical columns to demean by")
        sub.add_argument("--transforms", help="transform spec file")
        sub.add_argument("--recover-gamma", action="store_true", default=None)

    def setup_handlers(self):
        subparsers = self.parser.add_subparsers(dest="command", required=True)
        commands = dict(get_command_list())

        for name in ("fit", "diagnose"):
            sub = subparsers.add_parser(name, help=commands[name])
            self._add_data(sub)
            self._add_common(sub)

        sim = subparsers.add_parser("simulate", help=commands["simulate"])
        sim.add_argument("--preset")
        sim.add_argument("--list-presets", action="store_true", default=None)
        sim.add_argument("--variant", choices=[v.value for v in Variant])
        sim.add_argument("--reps", type=int)
        sim.add_argument("--parallel", action="store_true", default=None)
        sim.add_argument("--n", type=int)
        sim.add_argument("--groups", type=int, help="number of clusters")
        sim.add_argument("--controls", type=int, help="K, or N_d - 1 for the two-way design")
        sim.add_argument("--rho", type=float)
        self._add_common(sim)

        oracle = subparsers.add_parser("oracle-check", help=commands["oracle-check"])
        oracle.add_argument("--n", type=int)
        oracle.add_argument("--clusters", help="cluster sizes, e.g. 2,2,2 or 3 or singleton")
        oracle.add_argument("--k", type=int, help="number of random controls")
        self._add_common(oracle)

    def build_config(self, argv: Optional[List[str]] = None) -> JobConfig:
        args = vars(self.parser.parse_args(argv))
        config_path = args.pop("config", None)
        file_values: Dict = load_config_file(config_path) if config_path else {}
        file_values.pop("command", None)
        return JobConfig.merged(file_values, args)

    def run(self, argv: Optional[List[str]] = None) -> int:
        try:
            config = self.build_config(argv)
        except ClusterRobustError as e:
            logger.error(f"Invalid configuration: {e}")
            return e.exit_code
        logger.info(f"Running {config.command}")
        code, _ = self.command_processor.execute(config.command, config)
        logger.info(f"{config.command} finished with exit code {code}")
        return code
