import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import scipy.linalg
from scipy.stats import norm

from config import DEFAULT_ALPHA
from services.errors import CollinearRegressorsError, ConfigError, IndefiniteVarianceError
from services.model_service import FitResult
from services.variance_service import VarianceEstimate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceReport:
    beta_hat: np.ndarray
    Omega_hat: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    alpha: float
    method: str
    names: Tuple[str, ...] = ()

    def rows(self) -> List[Dict]:
        return [
            {
                "name": self.names[k] if self.names else f"x{k}",
                "estimator": self.method,
                "beta": float(self.beta_hat[k]),
                "se": float(self.std_errors[k]),
                "ci_lower": float(self.ci_lower[k]),
                "ci_upper": float(self.ci_upper[k]),
                "p_value": float(self.p_values[k]),
            }
            for k in range(self.beta_hat.shape[0])
        ]


def sandwich(fit: FitResult, var: VarianceEstimate) -> np.ndarray:
    """Omega = Gamma^-1 Sigma Gamma^-1."""
    try:
        bread = scipy.linalg.solve(fit.Gamma_hat, np.eye(fit.d), assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise CollinearRegressorsError(f"Gamma_hat is singular ({e})")
    Omega = bread @ var.Sigma @ bread
    return 0.5 * (Omega + Omega.T)


def confidence_interval(
    fit: FitResult,
    Omega: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    method: str = "",
) -> InferenceReport:
    """Gaussian intervals and two-sided p-values for H0: beta_k = 0."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    diag = np.diag(Omega)
    names = fit.x_names or tuple(f"x{k}" for k in range(fit.d))
    for k, value in enumerate(diag):
        if not value > 0:
            logger.warning(f"Non-positive Omega diagonal for {names[k]} ({method}): {value:.3g}")
            raise IndefiniteVarianceError(k, names[k], float(value))

    se = np.sqrt(diag / fit.n)
    lower = fit.beta_hat - norm.ppf(1.0 - alpha / 2.0) * se
    upper = fit.beta_hat - norm.ppf(alpha / 2.0) * se
    z = fit.beta_hat / se
    p_values = 2.0 * norm.sf(np.abs(z))
    return InferenceReport(
        beta_hat=fit.beta_hat,
        Omega_hat=Omega,
        std_errors=se,
        ci_lower=lower,
        ci_upper=upper,
        p_values=p_values,
        alpha=alpha,
        method=method,
        names=tuple(names),
    )


def covers(report: InferenceReport, beta: np.ndarray) -> np.ndarray:
    beta = np.broadcast_to(np.asarray(beta, dtype=float), report.beta_hat.shape)
    return (report.ci_lower <= beta) & (beta <= report.ci_upper)
