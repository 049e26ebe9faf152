import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from config import COLLINEARITY_TOL, DEFAULT_RANK_TOL, DENSE_M_CACHE_MAX_N
from services.errors import (
    CollinearRegressorsError,
    DataError,
    SaturatedControlsError,
)

logger = logging.getLogger(__name__)


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(n, 0)
    if arr.ndim != 2 or arr.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Outcome, regressors of interest, controls and cluster ids for one sample."""

    y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    cluster_id: np.ndarray
    y_name: str = "y"
    x_names: Tuple[str, ...] = ()
    w_names: Tuple[str, ...] = ()
    aux: Optional[pd.DataFrame] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        X = _as_matrix(self.X, n, "X")
        W = _as_matrix(self.W, n, "W") if self.W is not None else np.zeros((n, 0))
        cluster_id = np.asarray(self.cluster_id).reshape(-1)
        if X.shape[1] < 1:
            raise DataError("at least one regressor of interest is required")
        if cluster_id.shape[0] != n:
            raise DataError(
                f"cluster_id has {cluster_id.shape[0]} entries, expected {n}"
            )
        for name, arr in (("y", y), ("X", X), ("W", W)):
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(arr.reshape(n, -1)))[0]
                raise DataError(f"non-finite value in {name} at observation {bad[0]}")
        if pd.isna(pd.Series(cluster_id)).any():
            raise DataError("every observation needs a cluster id")

        x_names = tuple(self.x_names) or tuple(f"x{k}" for k in range(X.shape[1]))
        w_names = tuple(self.w_names) or tuple(f"w{k}" for k in range(W.shape[1]))
        if len(x_names) != X.shape[1] or len(w_names) != W.shape[1]:
            raise DataError("column names do not match matrix widths")

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "cluster_id", cluster_id)
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "w_names", w_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class ClusterPartition:
    groups: Tuple[np.ndarray, ...]
    sizes: np.ndarray
    codes: np.ndarray  # cluster position of each observation
    labels: np.ndarray

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def n(self) -> int:
        return int(self.codes.shape[0])


def partition_clusters(cluster_id) -> ClusterPartition:
    """Group observations by cluster id, clusters in order of first appearance."""
    ids = np.asarray(cluster_id).reshape(-1)
    if ids.size == 0:
        raise DataError("cluster id vector is empty")
    codes, labels = pd.factorize(pd.Series(ids), sort=False)
    codes = np.asarray(codes, dtype=np.int64)
    sizes = np.bincount(codes, minlength=len(labels))
    order = np.argsort(codes, kind="stable")
    groups = tuple(np.split(order, np.cumsum(sizes)[:-1]))
    return ClusterPartition(
        groups=groups, sizes=sizes, codes=codes, labels=np.asarray(labels)
    )


class AnnihilatorOperator:
    """Residual maker M = I - W(W'W)^-1 W' held through the orthogonal factor of W.

    Entries are produced on demand from Q; the dense n x n matrix is built
    only when asked for and cached up to DENSE_M_CACHE_MAX_N observations.
    """

    def __init__(
        self,
        Q: np.ndarray,
        kept_columns: np.ndarray,
        dropped_columns: np.ndarray,
        R: Optional[np.ndarray] = None,
        pivot: Optional[np.ndarray] = None,
        n_columns: int = 0,
        cache_max_n: int = DENSE_M_CACHE_MAX_N,
    ):
        self.Q = Q
        self.kept_columns = kept_columns
        self.dropped_columns = dropped_columns
        self.R = R
        self.pivot = pivot
        self.n_columns = n_columns
        self.cache_max_n = cache_max_n
        self._dense: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def k_eff(self) -> int:
        return self.Q.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.k_eff == 0:
            return v.copy()
        return v - self.Q @ (self.Q.T @ v)

    def diag(self) -> np.ndarray:
        return np.clip(1.0 - np.einsum("ik,ik->i", self.Q, self.Q), 0.0, 1.0)

    def rows(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = -(self.Q[idx] @ self.Q.T)
        out[np.arange(idx.size), idx] += 1.0
        return out

    def submatrix(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        out = -(self.Q[rows] @ self.Q[cols].T)
        out += rows[:, None] == cols[None, :]
        return out

    def entries(self, rows, cols) -> np.ndarray:
        """Elementwise M[rows[k], cols[k]]."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        out = (rows == cols).astype(float)
        out -= np.einsum("ik,ik->i", self.Q[rows], self.Q[cols])
        return out

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        M = np.eye(self.n) - self.Q @ self.Q.T
        M = 0.5 * (M + M.T)
        if self.n <= self.cache_max_n:
            self._dense = M
        else:
            logger.warning(
                f"Dense M not cached: n={self.n} exceeds cache cap {self.cache_max_n}"
            )
        return M


def compute_annihilator(
    W: np.ndarray,
    rank_tol: float = DEFAULT_RANK_TOL,
    names: Optional[List[str]] = None,
) -> AnnihilatorOperator:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    n, K = W.shape
    if n < 1:
        raise DataError("control matrix has no rows")
    if K == 0:
        return AnnihilatorOperator(
            Q=np.zeros((n, 0)),
            kept_columns=np.array([], dtype=np.int64),
            dropped_columns=np.array([], dtype=np.int64),
        )

    Q, R, pivot = scipy.linalg.qr(W, mode="economic", pivoting=True)
    r_diag = np.abs(np.diag(R))
    if r_diag.size == 0 or r_diag[0] == 0:
        rank = 0
    else:
        rank = int(np.sum(r_diag > rank_tol * r_diag[0]))

    kept = np.sort(pivot[:rank])
    dropped = np.sort(pivot[rank:])
    if dropped.size:
        labels = [names[k] for k in dropped] if names else dropped.tolist()
        logger.warning(
            f"Dropped {dropped.size} collinear control column(s): {labels}"
        )
    if rank >= n:
        raise SaturatedControlsError(rank, n)

    return AnnihilatorOperator(
        Q=np.ascontiguousarray(Q[:, :rank]),
        kept_columns=kept,
        dropped_columns=dropped,
        R=R[:rank, :rank],
        pivot=pivot[:rank],
        n_columns=K,
    )


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    v_hat: np.ndarray
    u_hat: np.ndarray
    Gamma_hat: np.ndarray
    gamma_hat: Optional[np.ndarray] = None
    gamma_dropped: Optional[np.ndarray] = None
    x_names: Tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.u_hat.shape[0]

    @property
    def d(self) -> int:
        return self.beta_hat.shape[0]


def fit_ols(
    data: Dataset, op: AnnihilatorOperator, recover_gamma: bool = False
) -> FitResult:
    """Partialled-out OLS of y on X after projecting out the controls."""
    if op.n != data.n:
        raise DataError(f"operator built for n={op.n}, dataset has n={data.n}")
    n = data.n
    V = op.apply(data.X)

    # columns are rescaled to unit norm so the check does not depend on units
    col_norm = np.linalg.norm(data.X, axis=0)
    if col_norm.size == 0 or np.any(col_norm == 0.0):
        raise CollinearRegressorsError("a regressor column is identically zero")
    V_unit = V / col_norm
    svals = np.linalg.svd(V_unit, compute_uv=False)
    if svals.min() <= COLLINEARITY_TOL:
        raise CollinearRegressorsError(
            f"smallest singular value of MX (unit-norm columns) is {svals.min():.3g}"
        )

    gram = V_unit.T @ V_unit
    beta = scipy.linalg.solve(gram, V_unit.T @ data.y, assume_a="pos") / col_norm
    resid = data.y - data.X @ beta
    u = op.apply(resid)

    gamma = None
    gamma_dropped = None
    if recover_gamma and op.n_columns > 0:
        full = np.full(op.n_columns, np.nan)
        if op.k_eff:
            coef = scipy.linalg.solve_triangular(op.R, op.Q.T @ resid)
            full[op.pivot] = coef
        gamma = full[op.kept_columns]
        gamma_dropped = np.zeros(op.n_columns, dtype=bool)
        gamma_dropped[op.dropped_columns] = True

    Gamma_hat = V.T @ V / n
    return FitResult(
        beta_hat=beta,
        v_hat=V,
        u_hat=u,
        Gamma_hat=0.5 * (Gamma_hat + Gamma_hat.T),
        gamma_hat=gamma,
        gamma_dropped=gamma_dropped,
        x_names=data.x_names,
    )


def assumption_diagnostics(
    op: AnnihilatorOperator,
    fit: FitResult,
    partition: Optional[ClusterPartition] = None,
) -> Dict[str, float]:
    n = fit.n
    v_norms = np.linalg.norm(fit.v_hat, axis=1)
    return {
        "k_eff_over_n": op.k_eff / n,
        "min_M_ii": float(op.diag().min()),
        "max_v_norm_over_sqrt_n": float(v_norms.max() / np.sqrt(n)),
        "lambda_min_Gamma": float(np.linalg.eigvalsh(fit.Gamma_hat).min()),
        "n": n,
        "G": partition.G if partition is not None else None,
        "k_eff": op.k_eff,
    }
