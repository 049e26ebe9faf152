import logging
from typing import Dict, List

import numpy as np

from config import ORACLE_MAX_N, ORACLE_SIGMA_RTOL, ORACLE_TOL
from dataset.common_utils import JobConfig
from services.errors import ConfigError
from services.model_service import (
    Dataset,
    compute_annihilator,
    fit_ols,
    partition_clusters,
)
from services.variance_service import (
    KappaSystem,
    build_pair_index,
    ma_restriction,
    sigma_cr,
    sigma_general,
)
from command.utils import new_report

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_N = 6
DEFAULT_ORACLE_K = 2


def parse_cluster_sizes(text, n: int) -> List[int]:
    """'2,2,2' lists sizes; a single number s cuts n into runs of s; 'singleton' is s=1."""
    text = (text or "2").strip().lower()
    if text == "singleton":
        text = "1"
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse cluster sizes '{text}'")
    if not sizes or min(sizes) < 1:
        raise ConfigError(f"cluster sizes must be positive integers, got '{text}'")
    if len(sizes) == 1:
        s = sizes[0]
        sizes = [s] * (n // s) + ([n % s] if n % s else [])
    if sum(sizes) != n:
        raise ConfigError(f"cluster sizes {sizes} sum to {sum(sizes)}, expected n={n}")
    return sizes


def _check(name: str, diff: float, tol: float) -> Dict:
    return {"check": name, "max_abs_diff": float(diff), "tolerance": tol, "passed": bool(diff <= tol)}


def cmd_oracle_check(config: JobConfig) -> Dict:
    """Compare the correction system with the brute-force Kronecker product on a small random design."""
    n = config.n or DEFAULT_ORACLE_N
    k = DEFAULT_ORACLE_K if config.k is None else config.k
    if n > ORACLE_MAX_N:
        raise ConfigError(f"oracle-check is limited to n <= {ORACLE_MAX_N}, got n={n}")
    if not 0 <= k < n - 1:
        raise ConfigError(f"oracle-check needs 0 <= k < n - 1, got k={k}, n={n}")
    sizes = parse_cluster_sizes(config.clusters, n)

    rng = np.random.default_rng(config.seed)
    W = rng.standard_normal((n, k))
    X = rng.standard_normal((n, 1))
    y = X[:, 0] + rng.standard_normal(n)
    cluster_id = np.repeat(np.arange(len(sizes)), sizes)

    op = compute_annihilator(W)
    M = op.dense()
    partition = partition_clusters(cluster_id)
    restriction = ma_restriction(config.ma_lag) if config.ma_lag is not None else None
    idx = build_pair_index(partition, restriction)

    # S'(M (x) M)S with S picking vec positions j*n + i
    pos = idx.j * n + idx.i
    brute = np.kron(M, M)[np.ix_(pos, pos)]
    dense = KappaSystem(op, idx, mode="dense")
    free = KappaSystem(op, idx, mode="matrix_free")
    vec = rng.standard_normal(idx.L)

    checks = [
        _check("closed_form_vs_kronecker", np.abs(dense.matrix() - brute).max(), ORACLE_TOL),
        _check(
            "defining_form_vs_kronecker",
            np.abs(dense.defining_matrix() - brute[:, idx.swap_permutation()]).max(),
            ORACLE_TOL,
        ),
        _check("matrix_free_product", np.abs(free.matvec(vec) - brute @ vec).max(), ORACLE_TOL * n),
    ]

    singletons = build_pair_index(partition_clusters(np.arange(n)))
    hadamard = KappaSystem(op, singletons, mode="dense").matrix()
    checks.append(_check("singleton_vs_hadamard", np.abs(hadamard - M * M).max(), ORACLE_TOL))

    data = Dataset(y=y, X=X, W=W, cluster_id=cluster_id)
    fit = fit_ols(data, op)
    solved = sigma_cr(fit, op, idx, mode="dense").Sigma
    explicit = sigma_general(fit, idx, np.linalg.inv(brute)).Sigma
    scale = max(np.abs(solved).max(), np.finfo(float).tiny)
    checks.append(_check("sigma_general_vs_sigma_cr", np.abs(explicit - solved).max() / scale, ORACLE_SIGMA_RTOL))

    passed = all(c["passed"] for c in checks)
    logger.info(f"Oracle check n={n}, k={k}, clusters={sizes}: {'passed' if passed else 'FAILED'}")
    return new_report(
        "oracle-check",
        n=n,
        k=k,
        cluster_sizes=sizes,
        L=idx.L,
        seed=config.seed,
        passed=passed,
        results=checks,
    )
