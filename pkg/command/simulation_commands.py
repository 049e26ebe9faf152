import logging
from typing import Dict

from config import ALL_ESTIMATORS, DEFAULT_REPS
from dataset.common_utils import JobConfig
from services.design_service import (
    PRESETS,
    DesignSpec,
    Variant,
    get_preset,
    with_overrides,
)
from services.errors import ConfigError
from services.monte_carlo_service import MonteCarloConfig, run_monte_carlo
from command.utils import check_solver_options, new_report

logger = logging.getLogger(__name__)


def _preset_rows():
    rows = []
    for name, preset in PRESETS.items():
        design = preset.design.to_dict()
        rows.append(
            {
                "preset": name,
                "variant": design["variant"],
                "n": design["n"],
                "G": design["G"],
                "K": design.get("K", design.get("N_d")),
                "estimators": ",".join(preset.estimators),
                "kappa_norm": preset.kappa_norm,
            }
        )
    return rows


def _design(config: JobConfig):
    if config.preset:
        preset = get_preset(config.preset)
        design = with_overrides(
            preset.design, n=config.n, G=config.groups, K=config.controls, rho=config.rho
        )
        return design, preset.estimators, preset.reps, preset.kappa_norm
    if not (config.variant and config.n and config.groups):
        raise ConfigError("simulate needs --preset, or --variant with --n and --groups")
    try:
        variant = Variant(config.variant)
    except ValueError:
        raise ConfigError(f"unknown variant '{config.variant}', expected one of {[v.value for v in Variant]}")
    fields = {"rho": config.rho} if config.rho is not None else {}
    if variant == Variant.TWOWAY_FE:
        fields["N_d"] = config.controls + 1 if config.controls else None
    else:
        fields["K"] = config.controls or 1
    design = DesignSpec(variant, config.n, config.groups, **fields)
    return design, ALL_ESTIMATORS, DEFAULT_REPS, False


def cmd_simulate(config: JobConfig) -> Dict:
    if config.list_presets:
        return new_report("simulate", presets=len(PRESETS), results=_preset_rows())

    check_solver_options(config)
    design, estimators, reps, kappa_norm = _design(config)
    cfg = MonteCarloConfig(
        reps=config.reps or reps,
        seed=config.seed,
        alpha=config.alpha,
        estimators=tuple(config.estimators or estimators),
        parallel=config.parallel,
        solver_mode=config.solver_mode,
        tol=config.tol,
        kappa_norm=config.kappa_norm or ("auto" if kappa_norm else None),
    )
    summary = run_monte_carlo(design, cfg).to_dict()

    results = [
        {"estimator": label, **stats} for label, stats in summary.pop("estimators").items()
    ]
    return new_report("simulate", preset=config.preset, **summary, results=results)
