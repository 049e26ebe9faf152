import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import (
    ALL_ESTIMATORS,
    CALIBRATION_SPAWN_KEY,
    CG_TOL,
    DEFAULT_ALPHA,
    DEFAULT_SEED,
    MC_LOG_EVERY,
    THREADS,
)
from services.design_service import Constants, DesignSpec, calibrate_constants, generate
from services.errors import ClusterRobustError, ConfigError
from services.inference_service import confidence_interval, covers, sandwich
from services.model_service import compute_annihilator, fit_ols, partition_clusters
from services.variance_service import (
    build_kappa_system,
    build_pair_index,
    kappa_inf_norm,
    sigma_cr,
    sigma_lz,
    sigma_unfeasible,
)

logger = logging.getLogger(__name__)

ESTIMATOR_LABELS = {"unf": "UNFEASIBLE", "lz": "LZ", "cr": "CR"}


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent counter-based stream for replication ``rep``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep,))))


@dataclass(frozen=True)
class MonteCarloConfig:
    reps: int = 1
    seed: int = DEFAULT_SEED
    alpha: float = DEFAULT_ALPHA
    estimators: Tuple[str, ...] = ALL_ESTIMATORS
    parallel: bool = False
    workers: int = THREADS
    solver_mode: str = "auto"
    tol: float = CG_TOL
    kappa_norm: Optional[str] = None  # None, 'auto', 'exact' or 'estimate'

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError(f"reps must be at least 1, got {self.reps}")
        unknown = set(self.estimators) - set(ESTIMATOR_LABELS)
        if unknown or not self.estimators:
            raise ConfigError(f"unknown estimator(s): {sorted(unknown)}")


@dataclass(frozen=True)
class EstimatorSummary:
    mean_omega: Optional[float]
    bias_pct: Optional[float]
    sd_omega: Optional[float]
    coverage: Optional[float]
    rejection_rate: Optional[float]
    failures: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class MonteCarloSummary:
    design: Dict
    reps: int
    seed: int
    alpha: float
    mean_beta: Optional[float]
    var_beta: Optional[float]
    estimators: Dict[str, EstimatorSummary]
    kappa_norm_mean: Optional[float] = None
    kappa_norm_sd: Optional[float] = None
    failed_replications: int = 0
    constants: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        out = dict(self.__dict__)
        out["estimators"] = {k: v.to_dict() for k, v in self.estimators.items()}
        return out


def run_replication(
    design: DesignSpec, constants: Constants, cfg: MonteCarloConfig, rep: int
) -> Dict:
    rng = replication_rng(cfg.seed, rep)
    record: Dict = {"rep": rep, "beta": np.nan, "kappa_norm": np.nan, "failed": False}
    for est in cfg.estimators:
        record[f"omega_{est}"] = np.nan
        record[f"cover_{est}"] = np.nan

    try:
        data, U = generate(design, rng, constants)
        partition = partition_clusters(data.cluster_id)
        op = compute_annihilator(data.W, names=list(data.w_names))
        fit = fit_ols(data, op)
    except ClusterRobustError as e:
        logger.warning(f"Replication {rep} failed before estimation: {e}")
        record["failed"] = True
        return record
    record["beta"] = float(fit.beta_hat[0])

    for est in cfg.estimators:
        try:
            if est == "unf":
                var = sigma_unfeasible(fit, partition, U)
            elif est == "lz":
                var = sigma_lz(fit, partition)
            else:
                idx = build_pair_index(partition)
                system = build_kappa_system(op, idx, cfg.solver_mode)
                var = sigma_cr(fit, op, idx, tol=cfg.tol, system=system)
                if cfg.kappa_norm:
                    record["kappa_norm"] = kappa_inf_norm(system, cfg.kappa_norm)
            Omega = sandwich(fit, var)
            record[f"omega_{est}"] = float(Omega[0, 0])
            report = confidence_interval(fit, Omega, cfg.alpha, ESTIMATOR_LABELS[est])
            record[f"cover_{est}"] = float(covers(report, design.beta)[0])
        except ClusterRobustError as e:
            logger.warning(f"Replication {rep}, estimator {est} failed: {e}")
    return record


def _simulate_batch(args) -> List[Dict]:
    # module level so ProcessPoolExecutor can pickle it
    design, constants, cfg, reps = args
    return [run_replication(design, constants, cfg, rep) for rep in reps]


def _std(values: pd.Series) -> Optional[float]:
    return float(values.std(ddof=1)) if values.shape[0] >= 2 else None


def summarize(records: pd.DataFrame, design: DesignSpec, cfg: MonteCarloConfig, constants: Constants) -> MonteCarloSummary:
    n = design.n
    beta = records["beta"].dropna()
    mean_beta = float(beta.mean()) if beta.shape[0] else None
    var_beta = float(beta.var(ddof=1)) if beta.shape[0] >= 2 else None
    target = n * var_beta if var_beta else None

    estimators = {}
    for est in cfg.estimators:
        omega = records[f"omega_{est}"].dropna()
        cover = records[f"cover_{est}"].dropna()
        mean_omega = float(omega.mean()) if omega.shape[0] else None
        bias = (
            100.0 * (mean_omega - target) / target
            if target and mean_omega is not None
            else None
        )
        coverage = float(cover.mean()) if cover.shape[0] else None
        estimators[ESTIMATOR_LABELS[est]] = EstimatorSummary(
            mean_omega=mean_omega,
            bias_pct=bias,
            sd_omega=_std(omega),
            coverage=coverage,
            rejection_rate=None if coverage is None else 1.0 - coverage,
            failures=int(records.shape[0] - omega.shape[0]),
        )

    norms = records["kappa_norm"].dropna()
    return MonteCarloSummary(
        design=design.to_dict(),
        reps=cfg.reps,
        seed=cfg.seed,
        alpha=cfg.alpha,
        mean_beta=mean_beta,
        var_beta=var_beta,
        estimators=estimators,
        kappa_norm_mean=float(norms.mean()) if norms.shape[0] else None,
        kappa_norm_sd=_std(norms),
        failed_replications=int(records["failed"].sum()),
        constants=constants.to_dict(),
    )


def run_replications(
    design: DesignSpec,
    cfg: MonteCarloConfig,
    constants: Optional[Constants] = None,
) -> Tuple[pd.DataFrame, Constants]:
    """One record per replication, ordered by replication number whatever ``cfg.parallel`` is."""
    if constants is None:
        calib_rng = replication_rng(cfg.seed, CALIBRATION_SPAWN_KEY)
        constants = calibrate_constants(design, calib_rng)

    logger.info(
        f"Monte Carlo: {design.variant.value}, n={design.n}, G={design.G}, reps={cfg.reps}, "
        f"estimators={','.join(cfg.estimators)}, parallel={cfg.parallel}"
    )
    records: List[Dict] = []
    if cfg.parallel and cfg.workers > 1 and cfg.reps > 1:
        n_chunks = min(cfg.workers * 4, cfg.reps)
        batches = np.array_split(np.arange(cfg.reps), n_chunks)
        by_batch: Dict[int, List[Dict]] = {}
        with ProcessPoolExecutor(max_workers=cfg.workers) as executor:
            futures = {
                executor.submit(_simulate_batch, (design, constants, cfg, batch.tolist())): i
                for i, batch in enumerate(batches)
            }
            for future in as_completed(futures):
                by_batch[futures[future]] = future.result()
                done = sum(len(v) for v in by_batch.values())
                logger.info(f"Monte Carlo progress: {done}/{cfg.reps}")
        for i in range(len(batches)):
            records.extend(by_batch[i])
    else:
        for rep in range(cfg.reps):
            records.append(run_replication(design, constants, cfg, rep))
            if (rep + 1) % MC_LOG_EVERY == 0:
                logger.info(f"Monte Carlo progress: {rep + 1}/{cfg.reps}")

    frame = pd.DataFrame.from_records(records).sort_values("rep", kind="stable").reset_index(drop=True)
    return frame, constants


def run_monte_carlo(
    design: DesignSpec,
    cfg: MonteCarloConfig,
    constants: Optional[Constants] = None,
) -> MonteCarloSummary:
    start = time.time()
    frame, constants = run_replications(design, cfg, constants)
    summary = summarize(frame, design, cfg, constants)
    logger.info(f"Monte Carlo finished in {time.time() - start:.1f}s, {summary.failed_replications} failed replications")
    return summary
