import logging
from typing import Dict, Optional, Tuple

from dataset.common_utils import JobConfig
from services.errors import ClusterRobustError
from command.fit_commands import cmd_diagnose, cmd_fit
from command.oracle_commands import cmd_oracle_check
from command.simulation_commands import cmd_simulate
from command.utils import _emit

logger = logging.getLogger(__name__)


class CommandProcessor:
    def __init__(self):
        self.handlers = {
            "fit": {
                "handler": cmd_fit,
                "requires": ("input", "y", "x"),
            },
            "diagnose": {
                "handler": cmd_diagnose,
                "requires": ("input", "y", "x"),
            },
            "simulate": {
                "handler": cmd_simulate,
                "requires": (),
            },
            "oracle-check": {
                "handler": cmd_oracle_check,
                "requires": (),
            },
        }

    def get(self, cmd: str):
        return self.handlers.get(cmd)

    def required_options(self, cmd: str) -> Tuple[str, ...]:
        info = self.get(cmd)
        return info.get("requires", ()) if info else ()

    def execute(self, cmd: str, config: JobConfig) -> Tuple[int, Optional[Dict]]:
        """Run one command and emit its report; returns (exit code, report)."""
        info = self.get(cmd)
        if not info:
            logger.error(f"Unknown command: {cmd}")
            return 2, None
        missing = [opt for opt in self.required_options(cmd) if not getattr(config, opt)]
        if missing:
            logger.error(f"{cmd} needs {', '.join('--' + opt for opt in missing)}")
            return 2, None
        try:
            report = info["handler"](config)
        except ClusterRobustError as e:
            logger.error(f"Error in {cmd}: {e}")
            return e.exit_code, None
        except Exception as e:
            logger.exception(f"Unexpected error in {cmd}: {e}")
            return 1, None
        _emit(report, config.format, config.output)
        if report.get("passed") is False:
            return 1, report
        return 0, report
