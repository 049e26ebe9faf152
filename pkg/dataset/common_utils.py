import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import (
    CG_TOL,
    DEFAULT_ALPHA,
    DEFAULT_SEED,
    OUTPUT_FORMATS,
)
from services.errors import ConfigError, DataError
from services.model_service import Dataset

logger = logging.getLogger(__name__)

COMMANDS = ("fit", "simulate", "diagnose", "oracle-check")
LIST_KEYS = ("x", "w", "absorb", "estimators")


def _split(value) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return tuple(str(part).strip() for part in value)


@dataclass(frozen=True)
class JobConfig:
    """Everything one CLI invocation needs, whatever source each value came from."""

    command: str = "fit"
    input: Optional[str] = None
    y: Optional[str] = None
    x: Tuple[str, ...] = ()
    w: Tuple[str, ...] = ()
    cluster: Optional[str] = None
    absorb: Tuple[str, ...] = ()
    transforms: Optional[str] = None
    estimators: Tuple[str, ...] = ()  # empty: the command's own default
    alpha: float = DEFAULT_ALPHA
    solver_mode: str = "auto"
    tol: float = CG_TOL
    max_iter: Optional[int] = None
    collapsed: bool = False
    ma_lag: Optional[int] = None
    kappa_norm: Optional[str] = None
    recover_gamma: bool = False
    format: str = "json"
    output: Optional[str] = None
    seed: int = DEFAULT_SEED
    preset: Optional[str] = None
    variant: Optional[str] = None
    reps: Optional[int] = None
    parallel: bool = False
    n: Optional[int] = None
    groups: Optional[int] = None
    controls: Optional[int] = None
    rho: Optional[float] = None
    clusters: Optional[str] = None
    k: Optional[int] = None
    list_presets: bool = False

    def __post_init__(self):
        for key in LIST_KEYS:
            object.__setattr__(self, key, _split(getattr(self, key)))
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}', expected one of {COMMANDS}")
        if self.format not in OUTPUT_FORMATS:
            raise ConfigError(f"unknown output format '{self.format}', expected one of {OUTPUT_FORMATS}")

    def require_columns(self):
        """Column roles a fit or diagnose run cannot do without."""
        if not self.input:
            raise ConfigError("--input is required")
        if not self.y:
            raise ConfigError("--y is required")
        if not self.x:
            raise ConfigError("at least one --x column is required")
        overlap = set(self.x) & (set(self.w) | {self.y})
        if overlap:
            raise ConfigError(f"column(s) {sorted(overlap)} used in more than one role")

    @classmethod
    def merged(cls, file_values: Dict[str, Any], flag_values: Dict[str, Any]) -> "JobConfig":
        """Built-in defaults, overridden by the config file, overridden by flags."""
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}
        for source in (file_values, flag_values):
            for key, value in source.items():
                key = key.replace("-", "_")
                if key not in known:
                    raise ConfigError(f"unknown configuration key '{key}'")
                if value is not None:
                    values[key] = value
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = file_path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return values

    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_scalar(value)
    logger.debug(f"Loaded {len(values)} setting(s) from {path}")
    return values


def read_frame(path: str) -> pd.DataFrame:
    """Raw table with every cell as text, rows in file order."""
    file_path = Path(path)
    if not file_path.is_file():
        raise DataError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(
            file_path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"input file {path} is empty")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}")
    if frame.shape[0] == 0:
        raise DataError(f"input file {path} has a header but no data rows")
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def require_columns(frame: pd.DataFrame, columns, path: str = "input"):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"column(s) {missing} not found in {path}; available: {list(frame.columns)}")


def numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    """Column as finite floats; failures name the 1-based data row and the column."""
    require_columns(frame, [column])
    raw = frame[column].astype(str).str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        row = int(bad[0]) + 1
        raise DataError(
            f"non-numeric value '{raw.iloc[bad[0]]}' in column '{column}' at row {row} (line {row + 1})"
        )
    return values


def numeric_block(frame: pd.DataFrame, columns) -> np.ndarray:
    if not columns:
        return np.zeros((frame.shape[0], 0))
    return np.column_stack([numeric_column(frame, c) for c in columns])


def label_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    """Column as stripped text labels; blank cells are rejected with their 1-based data row."""
    require_columns(frame, [column])
    raw = frame[column].astype(str).str.strip()
    blank = np.flatnonzero((raw == "").to_numpy())
    if blank.size:
        row = int(blank[0]) + 1
        raise DataError(f"blank label in column '{column}' at row {row} (line {row + 1})")
    return raw.to_numpy()


def read_csv(path: str, config: JobConfig) -> Dataset:
    """Load the columns ``config`` names; cluster ids are kept verbatim as text.

    Without a cluster column every observation is its own cluster.
    """
    frame = read_frame(path)
    roles: List[str] = [config.y, *config.x, *config.w]
    extra = [c for c in (config.cluster, *config.absorb) if c]
    require_columns(frame, roles + extra, path)
    for column in config.absorb:
        label_column(frame, column)

    if config.cluster:
        cluster_id = label_column(frame, config.cluster)
    else:
        cluster_id = np.arange(frame.shape[0])

    data = Dataset(
        y=numeric_column(frame, config.y),
        X=numeric_block(frame, config.x),
        W=numeric_block(frame, config.w),
        cluster_id=cluster_id,
        y_name=config.y,
        x_names=tuple(config.x),
        w_names=tuple(config.w),
        aux=frame,
    )
    logger.info(f"Read {path}: n={data.n}, d={data.d}, K={data.K}")
    return data
