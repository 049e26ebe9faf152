import logging
from typing import Dict, Tuple

from config import ESTIMATORS
from dataset.common_utils import JobConfig, read_csv
from dataset.transforms import TransformSpec, apply_transforms, load_transform_spec
from services.errors import ConfigError
from services.inference_service import confidence_interval, sandwich
from services.model_service import (
    AnnihilatorOperator,
    ClusterPartition,
    Dataset,
    FitResult,
    assumption_diagnostics,
    compute_annihilator,
    fit_ols,
    partition_clusters,
)
from services.variance_service import (
    build_kappa_system,
    build_pair_index,
    kappa_inf_norm,
    ma_restriction,
    sigma_cr,
    sigma_lz,
)
from command.utils import check_solver_options, new_report

logger = logging.getLogger(__name__)

FIT_ESTIMATORS = {"lz": "LZ", "cr": "CR"}


def _load(config: JobConfig) -> Dataset:
    config.require_columns()
    data = read_csv(config.input, config)
    spec = load_transform_spec(config.transforms) if config.transforms else TransformSpec()
    spec = spec.with_absorb(config.absorb)
    if spec.ops:
        data = apply_transforms(data, spec)
    return data


def prepare_fit(config: JobConfig) -> Tuple[Dataset, ClusterPartition, AnnihilatorOperator, FitResult]:
    """Read, transform, partition and fit: the part fit and diagnose share."""
    check_solver_options(config)
    data = _load(config)
    partition = partition_clusters(data.cluster_id)
    op = compute_annihilator(data.W, names=list(data.w_names))
    fit = fit_ols(data, op, recover_gamma=config.recover_gamma)
    logger.info(f"Fitted {data.y_name} on {list(data.x_names)}: n={data.n}, K={data.K}, k_eff={op.k_eff}, G={partition.G}")
    return data, partition, op, fit


def _pair_index(config: JobConfig, partition: ClusterPartition):
    restriction = ma_restriction(config.ma_lag) if config.ma_lag is not None else None
    return build_pair_index(partition, restriction)


def _shape(data: Dataset, op: AnnihilatorOperator, partition: ClusterPartition) -> Dict:
    return {
        "y": data.y_name,
        "n": data.n,
        "d": data.d,
        "K": data.K,
        "k_eff": op.k_eff,
        "G": partition.G,
    }


def cmd_fit(config: JobConfig) -> Dict:
    estimators = config.estimators or ESTIMATORS
    unknown = [e for e in estimators if e not in FIT_ESTIMATORS]
    if unknown:
        raise ConfigError(
            f"estimator(s) {unknown} not available for fit (choose from {sorted(FIT_ESTIMATORS)}; "
            "the unfeasible estimator needs true errors and exists only in simulate)"
        )
    data, partition, op, fit = prepare_fit(config)

    results = []
    solver_info: Dict = {}
    kappa_norm = None
    for est in estimators:
        if est == "lz":
            var = sigma_lz(fit, partition)
        else:
            idx = _pair_index(config, partition)
            system = build_kappa_system(op, idx, config.solver_mode, collapsed=config.collapsed)
            var = sigma_cr(
                fit,
                op,
                idx,
                tol=config.tol,
                max_iter=config.max_iter,
                system=system,
                kappa_norm=config.kappa_norm,
            )
            solver_info = dict(var.solver_info)
            kappa_norm = var.kappa_inf_norm
        Omega = sandwich(fit, var)
        report = confidence_interval(fit, Omega, config.alpha, FIT_ESTIMATORS[est])
        results.extend(report.rows())

    out = new_report(
        "fit",
        **_shape(data, op, partition),
        alpha=config.alpha,
        diagnostics=assumption_diagnostics(op, fit, partition),
        results=results,
    )
    if solver_info:
        out["solver_info"] = solver_info
    if kappa_norm is not None:
        out["kappa_inf_norm"] = kappa_norm
    if config.recover_gamma and fit.gamma_hat is not None:
        kept = [data.w_names[k] for k in op.kept_columns]
        out["gamma"] = dict(zip(kept, fit.gamma_hat))
        out["gamma_dropped"] = [data.w_names[k] for k in op.dropped_columns]
    return out


def cmd_diagnose(config: JobConfig) -> Dict:
    """Assumption diagnostics and correction-system size without estimating variances."""
    data, partition, op, fit = prepare_fit(config)
    diagnostics = assumption_diagnostics(op, fit, partition)
    idx = _pair_index(config, partition)
    diagnostics["L"] = idx.L
    diagnostics["max_cluster_size"] = int(partition.sizes.max())
    if config.kappa_norm:
        system = build_kappa_system(op, idx, config.solver_mode, collapsed=config.collapsed)
        diagnostics["kappa_inf_norm"] = kappa_inf_norm(system, config.kappa_norm)

    out = new_report(
        "diagnose",
        **_shape(data, op, partition),
        dropped_controls=[data.w_names[k] for k in op.dropped_columns],
        results=[diagnostics],
    )
    return out
