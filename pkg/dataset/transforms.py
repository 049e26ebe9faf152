"""Control-matrix construction from a small transform language.

A transform file holds one operation per line, ``#`` starts a comment, and
an optional header ``trend = <column>`` names the time column used by
``trend_interact``:

    trend = year
    square(lpris)
    interact(lpris, lpolice)
    trend_interact(lpris, 2)
    group_demean(state)

Generated columns are appended to W in file order. ``group_demean``
operations are collected and applied after every column has been built, so
generated controls are absorbed together with y, X and W.
"""

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ABSORB_MAX_ITER, ABSORB_TOL, MAX_POWER, MAX_TREND_DEGREE
from dataset.common_utils import label_column, numeric_column, require_columns
from services.errors import ConfigError, DataError
from services.model_service import Dataset

logger = logging.getLogger(__name__)

_CALL = re.compile(r"^(\w+)\s*\((.*)\)$")
_HEADER = re.compile(r"^(\w+)\s*=\s*(\S+)$")


@dataclass(frozen=True)
class Transform:
    op: str
    args: Tuple[str, ...]

    def __str__(self) -> str:
        return f"{self.op}({', '.join(self.args)})"


@dataclass(frozen=True)
class TransformSpec:
    ops: Tuple[Transform, ...] = ()
    trend: Optional[str] = None

    def with_absorb(self, columns: Sequence[str]) -> "TransformSpec":
        if not columns:
            return self
        return replace(self, ops=self.ops + (Transform("group_demean", tuple(columns)),))

    @property
    def absorb_groups(self) -> List[Tuple[str, ...]]:
        return [t.args for t in self.ops if t.op == "group_demean"]


def _int_arg(t: Transform, pos: int, low: int, high: int) -> int:
    try:
        value = int(t.args[pos])
    except ValueError:
        raise ConfigError(f"{t}: argument {pos + 1} must be an integer")
    if not low <= value <= high:
        raise ConfigError(f"{t}: argument {pos + 1} must lie in [{low}, {high}], got {value}")
    return value


class _Builder:
    """Column lookup and naming state while a spec is applied."""

    def __init__(self, data: Dataset, spec: TransformSpec):
        self.data = data
        self.frame = data.aux if data.aux is not None else pd.DataFrame(index=range(data.n))
        self.columns: Dict[str, np.ndarray] = dict(zip(data.w_names, data.W.T))
        self.added: List[str] = []
        self.trend: Optional[np.ndarray] = None
        if spec.trend:
            t = self.column(spec.trend)
            self.trend = t - t.min()

    def column(self, name: str) -> np.ndarray:
        if name in self.columns:
            return self.columns[name]
        if name in self.data.x_names:
            return self.data.X[:, self.data.x_names.index(name)]
        if name == self.data.y_name:
            return self.data.y
        if name in self.frame.columns:
            return numeric_column(self.frame, name)
        raise DataError(f"unknown column '{name}' in transform spec")

    def groups(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise DataError(f"unknown grouping column '{name}' in transform spec")
        codes, _ = pd.factorize(self.frame[name].astype(str), sort=False)
        return codes

    def add(self, name: str, values: np.ndarray):
        unique, k = name, 2
        while unique in self.columns:
            unique = f"{name}_{k}"
            k += 1
        self.columns[unique] = np.asarray(values, dtype=float)
        self.added.append(unique)


def _square(b: _Builder, t: Transform):
    (col,) = t.args
    b.add(f"{col}_sq", b.column(col) ** 2)


def _interact(b: _Builder, t: Transform):
    left, right = t.args
    b.add(f"{left}_x_{right}", b.column(left) * b.column(right))


def _power(b: _Builder, t: Transform):
    col = t.args[0]
    p = _int_arg(t, 1, 1, MAX_POWER)
    b.add(f"{col}_pow{p}", b.column(col) ** p)


def _trend_interact(b: _Builder, t: Transform):
    col = t.args[0]
    degree = _int_arg(t, 1, 1, MAX_TREND_DEGREE)
    if b.trend is None:
        raise ConfigError(f"{t}: no 'trend = <column>' header in the transform spec")
    values = b.column(col)
    for k in range(1, degree + 1):
        b.add(f"{col}_x_trend{k}", values * b.trend**k)


def _cumulative(b: _Builder, t: Transform):
    col, by = t.args
    values = pd.Series(b.column(col))
    b.add(f"{col}_cum", values.groupby(b.groups(by), sort=False).cumsum().to_numpy())


def _initial(b: _Builder, t: Transform):
    col, by = t.args
    values = pd.Series(b.column(col))
    b.add(f"{col}_init", values.groupby(b.groups(by), sort=False).transform("first").to_numpy())


def _indicators(b: _Builder, t: Transform):
    (col,) = t.args
    require_columns(b.frame, [col])
    levels = b.frame[col].astype(str).str.strip()
    dummies = pd.get_dummies(levels, prefix=col, prefix_sep="_", dtype=float)
    order = [f"{col}_{level}" for level in pd.unique(levels)]
    for name in order[1:]:
        b.add(name, dummies[name].to_numpy())


def _group_demean(b: _Builder, t: Transform):
    for by in t.args:
        b.groups(by)


# op -> handler and accepted argument counts
OPERATIONS: Dict[str, Dict] = {
    "square": {"handler": _square, "nargs": (1,)},
    "interact": {"handler": _interact, "nargs": (2,)},
    "power": {"handler": _power, "nargs": (2,)},
    "trend_interact": {"handler": _trend_interact, "nargs": (2,)},
    "cumulative": {"handler": _cumulative, "nargs": (2,)},
    "initial": {"handler": _initial, "nargs": (2,)},
    "indicators": {"handler": _indicators, "nargs": (1,)},
    "group_demean": {"handler": _group_demean, "nargs": None},
}


def parse_transform_spec(text: str, origin: str = "<transforms>") -> TransformSpec:
    ops: List[Transform] = []
    trend = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        header = _HEADER.match(line)
        if header:
            key, value = header.groups()
            if key != "trend":
                raise ConfigError(f"{origin}:{lineno}: unknown header '{key}'")
            trend = value
            continue
        call = _CALL.match(line)
        if not call:
            raise ConfigError(f"{origin}:{lineno}: cannot parse '{raw.strip()}'")
        op, arg_text = call.groups()
        args = tuple(a.strip() for a in arg_text.split(",") if a.strip())
        if op not in OPERATIONS:
            raise ConfigError(f"{origin}:{lineno}: unknown transform '{op}'")
        nargs = OPERATIONS[op]["nargs"]
        if (nargs is None and not args) or (nargs is not None and len(args) not in nargs):
            raise ConfigError(f"{origin}:{lineno}: wrong number of arguments for {op}")
        transform = Transform(op, args)
        if op == "power":
            _int_arg(transform, 1, 1, MAX_POWER)
        elif op == "trend_interact":
            _int_arg(transform, 1, 1, MAX_TREND_DEGREE)
        ops.append(transform)
    return TransformSpec(ops=tuple(ops), trend=trend)


def load_transform_spec(path: str) -> TransformSpec:
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"transform spec not found: {path}")
    return parse_transform_spec(file_path.read_text(encoding="utf-8"), origin=str(path))


def _group_means(Z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return pd.DataFrame(Z).groupby(codes, sort=False).transform("mean").to_numpy()


def demean(
    Z: np.ndarray,
    group_codes: Sequence[np.ndarray],
    tol: float = ABSORB_TOL,
    max_iter: int = ABSORB_MAX_ITER,
) -> np.ndarray:
    """Project the columns of Z off the fixed effects in ``group_codes``.

    One factor is an exact single pass; several factors use alternating
    projections until a sweep changes no entry by more than tol * max|Z|.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0 or not group_codes:
        return Z.copy()
    if len(group_codes) == 1:
        return Z - _group_means(Z, group_codes[0])

    scale = max(np.abs(Z).max(), 1.0)
    for sweep in range(1, max_iter + 1):
        previous = Z
        for codes in group_codes:
            Z = Z - _group_means(Z, codes)
        if np.abs(Z - previous).max() <= tol * scale:
            logger.debug(f"Alternating projections converged after {sweep} sweeps")
            return Z
    logger.warning(f"Alternating projections stopped after {max_iter} sweeps without converging")
    return Z


def absorb(data: Dataset, by_cols: Sequence[str], tol: float = ABSORB_TOL, max_iter: int = ABSORB_MAX_ITER) -> Dataset:
    """Within-transform y, X and W by the categorical columns ``by_cols``."""
    if not by_cols:
        return data
    if data.aux is None:
        raise DataError("absorption needs the raw columns of the input file")
    require_columns(data.aux, by_cols)
    codes = [pd.factorize(label_column(data.aux, c), sort=False)[0] for c in by_cols]
    Z = np.column_stack([data.y, data.X, data.W])
    Z = demean(Z, codes, tol=tol, max_iter=max_iter)
    d = data.d
    logger.info(f"Absorbed fixed effects for {list(by_cols)}")
    return replace(data, y=Z[:, 0], X=Z[:, 1 : 1 + d], W=Z[:, 1 + d :])


def apply_transforms(data: Dataset, spec: TransformSpec) -> Dataset:
    builder = _Builder(data, spec)
    for transform in spec.ops:
        OPERATIONS[transform.op]["handler"](builder, transform)

    if builder.added:
        names = tuple(builder.columns)
        W = np.column_stack([builder.columns[name] for name in names])
        data = replace(data, W=W, w_names=names)
        logger.info(f"Generated {len(builder.added)} control column(s), K={data.K}")

    by_cols: List[str] = []
    for group in spec.absorb_groups:
        by_cols.extend(c for c in group if c not in by_cols)
    return absorb(data, by_cols)
