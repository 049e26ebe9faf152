"""Cluster-robust meat matrices and the many-controls correction system.

The correction system is indexed by ordered within-cluster pairs
a = (g, i, j). Its matrix is the principal submatrix of M (x) M picked out
at vec positions j*n + i:

    A[a, b] = M[i_a, i_b] * M[j_a, j_b]

which is symmetric positive semidefinite. The entrywise rule
M[i_a, j_b] * M[j_a, i_b] is the same matrix with its columns permuted by
the pair swap (i, j) -> (j, i); on swap-invariant right-hand sides both
give the same solution, and ``KappaSystem.defining_matrix`` returns that
form for cross-checks.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import LinearOperator, onenormest

from config import (
    CG_MAX_ITER_FACTOR,
    CG_TOL,
    DENSE_BUILD_CHUNK,
    DENSE_SYSTEM_MAX_L,
    KAPPA_NORM_EXACT_MAX_L,
    SYSTEM_RCOND_MIN,
)
from services.errors import (
    ConfigError,
    InvalidRestrictionError,
    SingularSystemError,
)
from services.model_service import AnnihilatorOperator, ClusterPartition, FitResult

logger = logging.getLogger(__name__)

Restriction = Callable[[np.ndarray, np.ndarray], np.ndarray]

STORAGE_MODES = ("dense", "matrix_free", "auto")


def ma_restriction(lag: int) -> Restriction:
    """Admit pairs at most ``lag`` positions apart within a cluster."""
    if lag < 0:
        raise InvalidRestrictionError(f"MA lag must be non-negative, got {lag}")
    return lambda p, q: np.abs(p - q) <= lag


@dataclass(frozen=True)
class PairIndex:
    cluster: np.ndarray
    i: np.ndarray
    j: np.ndarray
    p: np.ndarray  # within-cluster position of i
    q: np.ndarray  # within-cluster position of j
    n: int
    restricted: bool = False
    _swap: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def L(self) -> int:
        return int(self.i.shape[0])

    def keys(self) -> np.ndarray:
        return self.i * self.n + self.j

    def position(self, i: int, j: int) -> int:
        key = i * self.n + j
        keys = self.keys()
        hit = np.flatnonzero(keys == key)
        if hit.size == 0:
            raise KeyError(f"pair ({i}, {j}) not in index")
        return int(hit[0])

    def swap_permutation(self) -> np.ndarray:
        """Position of (g, j, i) for every pair (g, i, j)."""
        if self._swap is not None:
            return self._swap
        keys = self.keys()
        order = np.argsort(keys, kind="stable")
        swapped = self.j * self.n + self.i
        swap = order[np.searchsorted(keys[order], swapped)]
        object.__setattr__(self, "_swap", swap)
        return swap

    def unordered(self) -> np.ndarray:
        return self.p <= self.q


def build_pair_index(
    partition: ClusterPartition, restriction: Optional[Restriction] = None
) -> PairIndex:
    """Enumerate ordered within-cluster pairs, cluster by cluster, i outer, j inner.

    ``restriction`` receives within-cluster position grids (p, q) and returns
    the admissible mask. It must keep the diagonal and be symmetric.
    """
    masks: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    clusters, ii, jj, pp, qq = [], [], [], [], []
    for g, members in enumerate(partition.groups):
        s = members.shape[0]
        if s not in masks:
            P, Q = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
            if restriction is None:
                mask = np.ones((s, s), dtype=bool)
            else:
                mask = np.broadcast_to(
                    np.asarray(restriction(P, Q), dtype=bool), (s, s)
                )
                if not np.all(np.diag(mask)):
                    raise InvalidRestrictionError(
                        "restriction excludes a diagonal pair (i, i); variances cannot be restricted to zero"
                    )
                if not np.array_equal(mask, mask.T):
                    raise InvalidRestrictionError(
                        "restriction must be symmetric in (i, j)"
                    )
            masks[s] = (P[mask], Q[mask])
        p, q = masks[s]
        clusters.append(np.full(p.shape[0], g, dtype=np.int64))
        ii.append(members[p])
        jj.append(members[q])
        pp.append(p)
        qq.append(q)

    idx = PairIndex(
        cluster=np.concatenate(clusters),
        i=np.concatenate(ii).astype(np.int64),
        j=np.concatenate(jj).astype(np.int64),
        p=np.concatenate(pp).astype(np.int64),
        q=np.concatenate(qq).astype(np.int64),
        n=partition.n,
        restricted=restriction is not None,
    )
    logger.debug(f"Pair index built: G={partition.G}, L={idx.L}")
    return idx


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    tol: float = CG_TOL,
    maxiter: int = 1000,
    precond: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Dict]:
    """Jacobi-preconditioned CG; ``tol`` is relative to ||b||.

    Returns the iterate and {'niter', 'success', 'res_norm'} with the
    relative residual norm.
    """
    b = np.asarray(b, dtype=float)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), {"niter": 0, "success": True, "res_norm": 0.0}
    inv_diag = None
    if precond is not None:
        inv_diag = 1.0 / np.where(precond > 0, precond, 1.0)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = r @ z
    target = tol * b_norm

    niter = 0
    res = np.linalg.norm(r)
    for niter in range(1, maxiter + 1):
        if res <= target:
            niter -= 1
            break
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        res = np.linalg.norm(r)
        z = r * inv_diag if inv_diag is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new

    return x, {"niter": niter, "success": res <= target, "res_norm": res / b_norm}


class KappaSystem:
    """The L x L correction system, dense or as a matrix-free operator.

    With ``collapsed=True`` the system is written on unordered pairs
    (p <= q) as T'AT, where T expands an unordered pair to both orders;
    solutions are expanded back to ordered pairs.
    """

    def __init__(
        self,
        op: AnnihilatorOperator,
        idx: PairIndex,
        mode: str = "dense",
        collapsed: bool = False,
        chunk: int = DENSE_BUILD_CHUNK,
    ):
        if mode not in ("dense", "matrix_free"):
            raise ConfigError(f"unknown storage mode: {mode}")
        if op.n != idx.n:
            raise ConfigError(f"pair index built for n={idx.n}, operator has n={op.n}")
        self.op = op
        self.idx = idx
        self.mode = mode
        self.collapsed = collapsed
        self.chunk = chunk
        self._dense: Optional[np.ndarray] = None
        self._factor = None

        if collapsed:
            keep = idx.unordered()
            compact = np.cumsum(keep) - 1
            rep = np.where(keep, np.arange(idx.L), idx.swap_permutation())
            col = compact[rep]
            self.sys_i = idx.i[keep]
            self.sys_j = idx.j[keep]
            self.multiplicity = np.where(self.sys_i == self.sys_j, 1.0, 2.0)
            self.expansion = scipy.sparse.csr_matrix(
                (np.ones(idx.L), (np.arange(idx.L), col)),
                shape=(idx.L, int(keep.sum())),
            )
        else:
            self.sys_i = idx.i
            self.sys_j = idx.j
            self.multiplicity = None
            self.expansion = None

        if mode == "dense":
            self._dense = self._assemble()

    @property
    def L(self) -> int:
        return self.idx.L

    @property
    def size(self) -> int:
        return int(self.sys_i.shape[0])

    def _gather(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if self.op.n <= self.op.cache_max_n:
            return self.op.dense()[np.ix_(rows, cols)]
        return self.op.submatrix(rows, cols)

    def _assemble(self) -> np.ndarray:
        I, J = self.sys_i, self.sys_j
        size = self.size
        out = np.empty((size, size))
        for start in range(0, size, self.chunk):
            sl = slice(start, min(start + self.chunk, size))
            block = self._gather(I[sl], I) * self._gather(J[sl], J)
            if self.collapsed:
                block += self._gather(I[sl], J) * self._gather(J[sl], I)
                block *= 0.5 * self.multiplicity[sl, None] * self.multiplicity[None, :]
            out[sl] = block
        return 0.5 * (out + out.T)

    def diagonal(self) -> np.ndarray:
        d = self.op.entries(self.sys_i, self.sys_i) * self.op.entries(self.sys_j, self.sys_j)
        if self.collapsed:
            d = d + self.op.entries(self.sys_i, self.sys_j) ** 2
            d *= 0.5 * self.multiplicity**2
        return d

    def matrix(self) -> np.ndarray:
        """Dense system matrix (ordered pairs unless collapsed)."""
        if self._dense is None:
            return self._assemble()
        return self._dense

    def defining_matrix(self) -> np.ndarray:
        """Entrywise rule A[a, b] = M[i_a, j_b] * M[j_a, i_b] on ordered pairs."""
        if self.collapsed:
            raise ConfigError("defining form is only available on ordered pairs")
        return self.matrix()[:, self.idx.swap_permutation()]

    def _ordered_matvec(self, c: np.ndarray) -> np.ndarray:
        # D = M C M with C[i_b, j_b] = c_b, gathered at (i_a, j_a), through Q only
        idx = self.idx
        Q = self.op.Q
        if self.op.k_eff == 0:
            return c.copy()
        C = scipy.sparse.csr_matrix((c, (idx.i, idx.j)), shape=(idx.n, idx.n))
        CQ = C @ Q
        CtQ = C.T @ Q
        core = Q.T @ CQ
        QI = Q[idx.i]
        QJ = Q[idx.j]
        out = c.copy()
        out -= np.einsum("ak,ak->a", QI, CtQ[idx.j])
        out -= np.einsum("ak,ak->a", CQ[idx.i], QJ)
        out += np.einsum("ak,ak->a", QI @ core, QJ)
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._dense is not None:
            return self._dense @ x
        if self.collapsed:
            T = self.expansion
            return T.T @ self._ordered_matvec(T @ x)
        return self._ordered_matvec(x)

    def _check_cluster_indicators(self):
        # a cluster indicator inside the span of W puts a null vector in the system
        Q = self.op.Q
        if self.op.k_eff == 0:
            return
        codes = self.idx.cluster
        G = int(codes.max()) + 1
        sums = np.zeros((G, Q.shape[1]))
        members = np.zeros(G)
        diag = self.idx.i == self.idx.j
        np.add.at(sums, codes[diag], Q[self.idx.i[diag]])
        np.add.at(members, codes[diag], 1.0)
        residual = members - np.einsum("gk,gk->g", sums, sums)
        bad = np.flatnonzero(residual <= 1e-10 * members)
        if bad.size:
            raise SingularSystemError(
                f"{bad.size} cluster indicator(s) lie in the span of the controls (first: cluster {bad[0]})"
            )

    def solve(
        self,
        rhs: np.ndarray,
        tol: float = CG_TOL,
        max_iter: Optional[int] = None,
    ) -> Tuple[np.ndarray, Dict]:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.L,):
            raise ConfigError(f"right-hand side has shape {rhs.shape}, expected ({self.L},)")
        if not np.all(np.isfinite(rhs)):
            raise ConfigError("right-hand side is not finite")
        self._check_cluster_indicators()
        b = self.expansion.T @ rhs if self.collapsed else rhs

        if self._dense is not None:
            x = self._dense_solve(b)
            resid = np.linalg.norm(self._dense @ x - b)
            b_norm = np.linalg.norm(b)
            rel = resid / b_norm if b_norm > 0 else 0.0
            info = {"iterations": 0, "residual_norm": float(rel), "mode": "dense"}
        else:
            max_iter = max_iter or CG_MAX_ITER_FACTOR * self.size
            x, cg_info = conjugate_gradient(
                self.matvec, b, tol=tol, maxiter=max_iter, precond=self.diagonal()
            )
            if not cg_info["success"]:
                raise SingularSystemError(
                    f"CG did not converge in {cg_info['niter']} iterations (relative residual {cg_info['res_norm']:.3g})"
                )
            logger.info(f"CG converged in {cg_info['niter']} iterations, L={self.size}")
            info = {
                "iterations": int(cg_info["niter"]),
                "residual_norm": float(cg_info["res_norm"]),
                "mode": "matrix_free",
            }
        info["L"] = self.L
        info["collapsed"] = self.collapsed
        c = self.expansion @ x if self.collapsed else x
        return c, info

    def _cho(self):
        if self._factor is None:
            A = self._dense
            try:
                factor = scipy.linalg.cho_factor(A, lower=False, check_finite=False)
            except np.linalg.LinAlgError as e:
                raise SingularSystemError(f"Cholesky factorization failed ({e})")
            pivots = np.diag(factor[0]) ** 2
            scale = np.max(np.diag(A))
            ratio = pivots.min() / scale if scale > 0 else 0.0
            if not np.isfinite(ratio) or ratio < SYSTEM_RCOND_MIN:
                raise SingularSystemError(f"smallest Cholesky pivot ratio {ratio:.3g}")
            self._factor = factor
        return self._factor

    def _dense_solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho(), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        if self._dense is None:
            raise ConfigError("explicit inverse needs a dense system")
        return scipy.linalg.cho_solve(self._cho(), np.eye(self.size), check_finite=False)


def build_kappa_system(
    op: AnnihilatorOperator,
    idx: PairIndex,
    mode: str = "auto",
    collapsed: bool = False,
    dense_threshold: int = DENSE_SYSTEM_MAX_L,
) -> KappaSystem:
    if mode not in STORAGE_MODES:
        raise ConfigError(f"unknown solver mode '{mode}', expected one of {STORAGE_MODES}")
    if mode == "auto":
        mode = "dense" if idx.L <= dense_threshold else "matrix_free"
    logger.info(f"Building correction system: L={idx.L}, mode={mode}, collapsed={collapsed}")
    return KappaSystem(op, idx, mode=mode, collapsed=collapsed)


def solve_kappa_system(
    sys: KappaSystem,
    rhs: np.ndarray,
    tol: float = CG_TOL,
    max_iter: Optional[int] = None,
) -> np.ndarray:
    c, _ = sys.solve(rhs, tol=tol, max_iter=max_iter)
    return c


@dataclass(frozen=True)
class VarianceEstimate:
    Sigma: np.ndarray
    method: str
    solver_info: Dict = field(default_factory=dict)
    kappa_inf_norm: Optional[float] = None


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def _cluster_scores(v_hat: np.ndarray, errors: np.ndarray, partition: ClusterPartition) -> np.ndarray:
    scores = np.zeros((partition.G, v_hat.shape[1]))
    np.add.at(scores, partition.codes, v_hat * errors[:, None])
    return scores


def pair_weighted_sigma(v_hat: np.ndarray, idx: PairIndex, weights: np.ndarray) -> np.ndarray:
    """(1/n) sum_a weights_a v_{i_a} v_{j_a}', symmetrized."""
    n = v_hat.shape[0]
    S = (v_hat[idx.i] * weights[:, None]).T @ v_hat[idx.j] / n
    return _symmetrize(S)


def sigma_lz(fit: FitResult, partition: ClusterPartition) -> VarianceEstimate:
    scores = _cluster_scores(fit.v_hat, fit.u_hat, partition)
    return VarianceEstimate(Sigma=_symmetrize(scores.T @ scores / fit.n), method="LZ")


def sigma_unfeasible(
    fit: FitResult, partition: ClusterPartition, true_errors: np.ndarray
) -> VarianceEstimate:
    U = np.asarray(true_errors, dtype=float).reshape(-1)
    if U.shape[0] != fit.n:
        raise ConfigError(f"true errors have length {U.shape[0]}, expected {fit.n}")
    scores = _cluster_scores(fit.v_hat, U, partition)
    return VarianceEstimate(Sigma=_symmetrize(scores.T @ scores / fit.n), method="UNFEASIBLE")


def sigma_general(fit: FitResult, idx: PairIndex, kappa) -> VarianceEstimate:
    if getattr(kappa, "shape", None) != (idx.L, idx.L):
        raise ConfigError(
            f"kappa has shape {getattr(kappa, 'shape', None)}, expected ({idx.L}, {idx.L})"
        )
    s = fit.u_hat[idx.i] * fit.u_hat[idx.j]
    c = np.asarray(kappa @ s).reshape(-1)
    return VarianceEstimate(Sigma=pair_weighted_sigma(fit.v_hat, idx, c), method="GENERAL")


def sigma_cr(
    fit: FitResult,
    op: AnnihilatorOperator,
    idx: PairIndex,
    mode: str = "auto",
    tol: float = CG_TOL,
    max_iter: Optional[int] = None,
    collapsed: bool = False,
    system: Optional[KappaSystem] = None,
    kappa_norm: Optional[str] = None,
) -> VarianceEstimate:
    """Correction-matrix estimator: solve A c = s, weight pair products by c.

    ``kappa_norm`` ('exact', 'estimate' or 'auto') also records ||kappa||_inf.
    """
    sys = system if system is not None else build_kappa_system(op, idx, mode, collapsed)
    s = fit.u_hat[idx.i] * fit.u_hat[idx.j]
    c, info = sys.solve(s, tol=tol, max_iter=max_iter)
    Sigma = pair_weighted_sigma(fit.v_hat, idx, c)

    eig_min = float(np.linalg.eigvalsh(Sigma).min())
    info["min_eigenvalue"] = eig_min
    if eig_min < 0:
        logger.warning(f"CR meat matrix is indefinite, smallest eigenvalue {eig_min:.3g}")

    norm = kappa_inf_norm(sys, kappa_norm) if kappa_norm else None
    return VarianceEstimate(Sigma=Sigma, method="CR", solver_info=info, kappa_inf_norm=norm)


def expected_sigma(
    fit: FitResult,
    sys: KappaSystem,
    omega_pairs: np.ndarray,
    corrected: bool = True,
) -> np.ndarray:
    """Expectation of the LZ or CR meat for known pair covariances E[u_i u_j].

    Residual cross-products have mean A @ omega; the CR weights undo A.
    """
    omega_pairs = np.asarray(omega_pairs, dtype=float).reshape(-1)
    if omega_pairs.shape[0] != sys.L:
        raise ConfigError(f"omega has {omega_pairs.shape[0]} pairs, expected {sys.L}")
    mean_s = sys._ordered_matvec(omega_pairs)
    weights = solve_kappa_system(sys, mean_s) if corrected else mean_s
    return pair_weighted_sigma(fit.v_hat, sys.idx, weights)


def kappa_inf_norm(sys: KappaSystem, mode: str = "auto") -> float:
    """Maximum absolute row sum of the inverse of the ordered-pair system."""
    if sys.collapsed:
        sys = KappaSystem(sys.op, sys.idx, mode=sys.mode)
    if mode == "auto":
        mode = "exact" if sys.L <= KAPPA_NORM_EXACT_MAX_L else "estimate"
    if mode not in ("exact", "estimate"):
        raise ConfigError(f"unknown kappa norm mode '{mode}'")
    sys._check_cluster_indicators()

    if mode == "exact":
        if sys._dense is not None:
            inv = sys.inverse()
        else:
            inv = np.column_stack(
                [solve_kappa_system(sys, e) for e in np.eye(sys.L)]
            )
        return float(np.abs(inv).sum(axis=1).max())

    if sys._dense is not None:
        factor = sys._cho()
        solve = lambda v: scipy.linalg.cho_solve(factor, np.asarray(v).reshape(-1))
    else:
        solve = lambda v: solve_kappa_system(sys, np.asarray(v, dtype=float).reshape(-1))
    # the inverse is symmetric, so its 1-norm is its inf-norm
    inv_op = LinearOperator(
        (sys.L, sys.L), matvec=solve, rmatvec=solve, dtype=float
    )
    return float(onenormest(inv_op))
