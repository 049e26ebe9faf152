import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import JSON_SCHEMA_VERSION, TEXT_FLOAT_FORMAT
from services.errors import ConfigError
from services.variance_service import STORAGE_MODES

logger = logging.getLogger(__name__)

KAPPA_NORM_MODES = ("auto", "exact", "estimate")


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples to JSON types; NaN becomes null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def new_report(command: str, **fields) -> Dict[str, Any]:
    report = {"schema_version": JSON_SCHEMA_VERSION, "command": command}
    report.update(fields)
    report.setdefault("results", [])
    return report


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return TEXT_FLOAT_FORMAT.format(value)
    return str(value)


def _text(report: Dict[str, Any]) -> str:
    lines: List[str] = []
    for key, value in report.items():
        if key == "results":
            continue
        if isinstance(value, dict):
            lines.append(f"{key}:")
            width = max((len(str(k)) for k in value), default=0)
            for sub_key, sub_value in value.items():
                lines.append(f"  {str(sub_key).ljust(width)}  {_format_cell(sub_value)}")
        else:
            lines.append(f"{key}: {_format_cell(value)}")
    rows = report.get("results") or []
    if rows:
        table = pd.DataFrame(rows).map(_format_cell)
        lines.append("")
        lines.append(table.to_string(index=False))
    return "\n".join(lines) + "\n"


def render(report: Dict[str, Any], fmt: str = "json") -> str:
    report = _plain(report)
    if fmt == "json":
        return json.dumps(report, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        return pd.DataFrame(report.get("results") or []).to_csv(index=False)
    return _text(report)


def _emit(report: Dict[str, Any], fmt: str = "json", output: Optional[str] = None) -> str:
    """Write the rendered report to ``output`` or stdout; logs never go here."""
    text = render(report, fmt)
    if output:
        Path(output).write_text(text, encoding="utf-8")
        logger.info(f"Report written to {output}")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()
    return text


def check_solver_options(config) -> None:
    if config.solver_mode not in STORAGE_MODES:
        raise ConfigError(f"unknown solver mode '{config.solver_mode}', expected one of {STORAGE_MODES}")
    if config.kappa_norm and config.kappa_norm not in KAPPA_NORM_MODES:
        raise ConfigError(f"unknown kappa norm mode '{config.kappa_norm}', expected one of {KAPPA_NORM_MODES}")
    if config.tol <= 0:
        raise ConfigError(f"tol must be positive, got {config.tol}")
    if config.max_iter is not None and config.max_iter < 1:
        raise ConfigError(f"max_iter must be positive, got {config.max_iter}")
    if not 0.0 < config.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {config.alpha}")
