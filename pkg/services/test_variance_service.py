import numpy as np
import pytest
import scipy.sparse
from numpy.testing import assert_allclose, assert_array_equal

from services.errors import InvalidRestrictionError, SingularSystemError
from services.model_service import Dataset, compute_annihilator, fit_ols, partition_clusters
from services.variance_service import (
    KappaSystem,
    build_kappa_system,
    build_pair_index,
    expected_sigma,
    kappa_inf_norm,
    ma_restriction,
    pair_weighted_sigma,
    sigma_cr,
    sigma_general,
    sigma_lz,
    solve_kappa_system,
)


def _instance(seed, n=None, K=None, cluster=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(6, 13))
    K = int(rng.integers(0, 5)) if K is None else K
    if cluster is None:
        G = int(rng.integers(2, n // 2 + 1))
        cluster = np.sort(rng.integers(0, G, size=n))
    W = rng.standard_normal((n, K))
    X = rng.standard_normal((n, 1))
    y = X[:, 0] + rng.standard_normal(n)
    data = Dataset(y=y, X=X, W=W, cluster_id=cluster)
    op = compute_annihilator(W)
    return data, op, fit_ols(data, op), partition_clusters(cluster)


def _kronecker_system(op, idx):
    n = op.n
    pos = idx.j * n + idx.i
    M = op.dense()
    return np.kron(M, M)[np.ix_(pos, pos)]


def test_pair_index_order():
    idx = build_pair_index(partition_clusters([0, 0, 1, 1, 1]))
    assert idx.L == 4 + 9
    assert_array_equal(idx.i[:4], [0, 0, 1, 1])
    assert_array_equal(idx.j[:4], [0, 1, 0, 1])
    assert idx.position(2, 4) == 4 + 2
    assert idx.position(3, 4) == 4 + 5
    swap = idx.swap_permutation()
    assert_array_equal(idx.i[swap], idx.j)
    assert_array_equal(idx.j[swap], idx.i)


@pytest.mark.parametrize("seed", range(20))
def test_system_matches_kronecker_oracle(seed):
    _, op, _, partition = _instance(seed)
    idx = build_pair_index(partition)
    brute = _kronecker_system(op, idx)
    system = KappaSystem(op, idx, mode="dense")
    assert np.abs(system.matrix() - brute).max() <= 1e-12
    assert np.abs(system.defining_matrix() - brute[:, idx.swap_permutation()]).max() <= 1e-12


def test_matrix_free_product_matches_dense():
    _, op, _, partition = _instance(3, n=12, K=4)
    idx = build_pair_index(partition)
    dense = KappaSystem(op, idx, mode="dense")
    free = KappaSystem(op, idx, mode="matrix_free")
    vec = np.random.default_rng(1).standard_normal(idx.L)
    assert_allclose(free.matvec(vec), dense.matrix() @ vec, atol=1e-12)
    assert_allclose(free.diagonal(), np.diag(dense.matrix()), atol=1e-12)


def test_no_controls_gives_identity_and_swap_permutation():
    _, op, _, partition = _instance(5, n=8, K=0)
    idx = build_pair_index(partition)
    system = KappaSystem(op, idx, mode="dense")
    assert_array_equal(system.matrix(), np.eye(idx.L))
    swap = idx.swap_permutation()
    assert_array_equal(system.defining_matrix(), np.eye(idx.L)[:, swap])
    rhs = np.arange(idx.L, dtype=float)
    assert_allclose(solve_kappa_system(system, rhs), rhs)


def test_singletons_reduce_to_hadamard_system():
    data, op, fit, _ = _instance(11, n=30, K=5, cluster=np.arange(30))
    idx = build_pair_index(partition_clusters(np.arange(30)))
    M = op.dense()
    system = KappaSystem(op, idx, mode="dense")
    assert np.abs(system.matrix() - M * M).max() <= 1e-12

    c = np.linalg.solve(M * M, fit.u_hat**2)
    expected = (fit.v_hat * c[:, None]).T @ fit.v_hat / data.n
    assert_allclose(sigma_cr(fit, op, idx, mode="dense").Sigma, expected, rtol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_identity_kappa_is_lz(seed):
    _, _, fit, partition = _instance(100 + seed)
    idx = build_pair_index(partition)
    lz = sigma_lz(fit, partition).Sigma
    assert_allclose(sigma_general(fit, idx, np.eye(idx.L)).Sigma, lz, rtol=1e-12, atol=1e-14)
    assert_allclose(
        sigma_general(fit, idx, scipy.sparse.identity(idx.L, format="csr")).Sigma,
        lz,
        rtol=1e-12,
        atol=1e-14,
    )


def test_cr_weights_are_swap_symmetric():
    _, op, fit, partition = _instance(21, n=12, K=3)
    idx = build_pair_index(partition)
    system = build_kappa_system(op, idx, "dense")
    c = solve_kappa_system(system, fit.u_hat[idx.i] * fit.u_hat[idx.j])
    assert_allclose(c, c[idx.swap_permutation()], atol=1e-10)


@pytest.fixture(scope="module")
def known_covariance():
    rng = np.random.default_rng(2024)
    n, G, K, rho = 40, 10, 12, 0.5
    cluster = np.repeat(np.arange(G), n // G)
    W = np.column_stack([np.ones(n), rng.standard_normal((n, K - 1))])
    X = rng.standard_normal((n, 1))
    data = Dataset(y=X[:, 0] + rng.standard_normal(n), X=X, W=W, cluster_id=cluster)
    op = compute_annihilator(W)
    fit = fit_ols(data, op)
    partition = partition_clusters(cluster)
    idx = build_pair_index(partition)
    sd = np.sqrt(0.5 + X[:, 0] ** 2)
    omega_pairs = sd[idx.i] * sd[idx.j] * np.where(idx.i == idx.j, 1.0, rho)
    Omega = np.outer(sd, sd) * np.where(cluster[:, None] == cluster[None, :], rho, 0.0)
    np.fill_diagonal(Omega, sd**2)
    return fit, op, idx, omega_pairs, Omega


def test_cr_is_exactly_unbiased_and_lz_is_not(known_covariance):
    fit, op, idx, omega_pairs, _ = known_covariance
    system = build_kappa_system(op, idx, "dense")
    truth = pair_weighted_sigma(fit.v_hat, idx, omega_pairs)
    assert_allclose(expected_sigma(fit, system, omega_pairs, corrected=True), truth, rtol=1e-9)
    lz = expected_sigma(fit, system, omega_pairs, corrected=False)
    assert abs(lz[0, 0] / truth[0, 0] - 1.0) > 0.05


def test_cr_mean_over_replications_is_unbiased(known_covariance):
    fit, op, idx, omega_pairs, Omega = known_covariance
    rng = np.random.default_rng(99)
    reps = 20_000
    U = rng.standard_normal((reps, op.n)) @ np.linalg.cholesky(Omega).T
    U_hat = U @ op.dense()
    mean_s = (U_hat[:, idx.i] * U_hat[:, idx.j]).mean(axis=0)

    system = build_kappa_system(op, idx, "dense")
    truth = pair_weighted_sigma(fit.v_hat, idx, omega_pairs)[0, 0]
    cr = pair_weighted_sigma(fit.v_hat, idx, solve_kappa_system(system, mean_s))[0, 0]
    lz = pair_weighted_sigma(fit.v_hat, idx, mean_s)[0, 0]
    assert abs(cr / truth - 1.0) < 0.02
    assert abs(lz / truth - 1.0) > 0.05


def test_dense_and_matrix_free_agree():
    rng = np.random.default_rng(60)
    n, G, K = 60, 15, 18
    cluster = np.repeat(np.arange(G), n // G)
    W = np.column_stack([np.ones(n), rng.standard_normal((n, K - 1))])
    X = rng.standard_normal((n, 1))
    data = Dataset(y=X[:, 0] + rng.standard_normal(n), X=X, W=W, cluster_id=cluster)
    op = compute_annihilator(W)
    fit = fit_ols(data, op)
    idx = build_pair_index(partition_clusters(cluster))

    dense = sigma_cr(fit, op, idx, mode="dense").Sigma
    free = sigma_cr(fit, op, idx, mode="matrix_free", tol=1e-12)
    assert free.solver_info["mode"] == "matrix_free"
    assert free.solver_info["iterations"] > 0
    assert_allclose(free.Sigma, dense, rtol=1e-8)

    for mode in ("dense", "matrix_free"):
        collapsed = sigma_cr(fit, op, idx, mode=mode, collapsed=True, tol=1e-12).Sigma
        assert_allclose(collapsed, dense, rtol=1e-8)


def test_cluster_labels_and_row_order_do_not_matter():
    data, op, fit, partition = _instance(31, n=24, K=4, cluster=np.repeat(np.arange(6), 4))
    idx = build_pair_index(partition)
    lz = sigma_lz(fit, partition).Sigma
    cr = sigma_cr(fit, op, idx, mode="dense").Sigma

    perm = np.random.default_rng(32).permutation(data.n)
    relabel = np.array([f"firm{(5 * g) % 6}" for g in range(6)])
    moved = Dataset(
        y=data.y[perm], X=data.X[perm], W=data.W[perm], cluster_id=relabel[data.cluster_id[perm]]
    )
    moved_op = compute_annihilator(moved.W)
    moved_fit = fit_ols(moved, moved_op)
    moved_partition = partition_clusters(moved.cluster_id)
    moved_idx = build_pair_index(moved_partition)
    assert_allclose(sigma_lz(moved_fit, moved_partition).Sigma, lz, rtol=0, atol=1e-10)
    assert_allclose(sigma_cr(moved_fit, moved_op, moved_idx, mode="dense").Sigma, cr, rtol=0, atol=1e-10)


def test_kappa_norm_estimate_and_exact():
    _, op, _, partition = _instance(8, n=24, K=6, cluster=np.repeat(np.arange(6), 4))
    idx = build_pair_index(partition)
    dense = build_kappa_system(op, idx, "dense")
    exact = kappa_inf_norm(dense, "exact")
    assert exact == pytest.approx(np.abs(np.linalg.inv(_kronecker_system(op, idx))).sum(axis=1).max())
    assert exact >= 1.0
    estimate = kappa_inf_norm(dense, "estimate")
    assert 0.5 * exact <= estimate <= exact * (1.0 + 1e-8)
    free = build_kappa_system(op, idx, "matrix_free")
    assert kappa_inf_norm(free, "exact") == pytest.approx(exact, rel=1e-6)
    collapsed = build_kappa_system(op, idx, "dense", collapsed=True)
    assert kappa_inf_norm(collapsed, "exact") == pytest.approx(exact, rel=1e-10)


@pytest.mark.parametrize("mode", ["dense", "matrix_free"])
def test_cluster_dummies_make_the_system_singular(mode):
    rng = np.random.default_rng(4)
    cluster = np.repeat(np.arange(5), 4)
    W = np.column_stack([(cluster == g).astype(float) for g in range(5)] + [rng.standard_normal(20)])
    X = rng.standard_normal((20, 1))
    data = Dataset(y=X[:, 0] + rng.standard_normal(20), X=X, W=W, cluster_id=cluster)
    op = compute_annihilator(W)
    fit = fit_ols(data, op)
    idx = build_pair_index(partition_clusters(cluster))
    with pytest.raises(SingularSystemError, match="cluster indicator"):
        sigma_cr(fit, op, idx, mode=mode)


def test_restrictions():
    partition = partition_clusters([0, 0, 0])
    assert build_pair_index(partition, ma_restriction(1)).L == 7
    assert build_pair_index(partition, ma_restriction(0)).L == 3
    with pytest.raises(InvalidRestrictionError):
        build_pair_index(partition, lambda p, q: p != q)
    with pytest.raises(InvalidRestrictionError):
        build_pair_index(partition, lambda p, q: q >= p)
    with pytest.raises(InvalidRestrictionError):
        ma_restriction(-1)


def test_restricted_cr_with_singleton_restriction_is_hadamard():
    data, op, fit, partition = _instance(13, n=16, K=3, cluster=np.repeat(np.arange(4), 4))
    restricted = build_pair_index(partition, ma_restriction(0))
    singletons = build_pair_index(partition_clusters(np.arange(16)))
    assert_allclose(
        sigma_cr(fit, op, restricted).Sigma,
        sigma_cr(fit, op, singletons).Sigma,
        rtol=1e-12,
    )


def test_lz_and_cr_converge_with_fixed_controls():
    medians = []
    for n in (100, 400, 1600):
        rng = np.random.default_rng(n)
        gaps = []
        for _ in range(50):
            cluster = np.repeat(np.arange(n // 4), 4)
            W = np.column_stack([np.ones(n), rng.standard_normal((n, 4))])
            X = rng.standard_normal((n, 1))
            data = Dataset(y=X[:, 0] + rng.standard_normal(n), X=X, W=W, cluster_id=cluster)
            op = compute_annihilator(W)
            fit = fit_ols(data, op)
            partition = partition_clusters(cluster)
            idx = build_pair_index(partition)
            lz = sigma_lz(fit, partition).Sigma[0, 0]
            cr = sigma_cr(fit, op, idx, mode="matrix_free").Sigma[0, 0]
            gaps.append(abs(lz - cr) / cr)
        medians.append(np.median(gaps))
    assert medians[0] > medians[1] > medians[2]
