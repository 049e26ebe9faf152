"""Monte Carlo data generating processes, calibration and named presets."""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from itertools import combinations_with_replacement
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from config import (
    ALL_ESTIMATORS,
    CALIBRATION_CHUNK,
    CALIBRATION_DRAWS,
    DEFAULT_BETA,
    DEFAULT_REPS,
    DEFAULT_RHO,
    SIM_BUDGET_N,
)
from services.errors import ConfigError, DataError
from services.model_service import Dataset

logger = logging.getLogger(__name__)

N_Z = 6
BASIS_SIZES = (1, 7, 13, 28, 34, 84, 90, 210, 216)


class Variant(str, Enum):
    MANY_CONTROLS = "many_controls"
    PARTIALLY_LINEAR = "partially_linear"
    TWOWAY_FE = "twoway_fe"


@dataclass(frozen=True)
class DesignSpec:
    variant: Variant
    n: int
    G: int
    K: int = 1
    rho: float = DEFAULT_RHO
    control_kind: str = "continuous"
    T: Optional[int] = None
    N_d: Optional[int] = None
    beta: float = DEFAULT_BETA
    d_assignment: str = "round_robin"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.n < 1 or self.G < 1:
            raise DataError(f"n and G must be positive, got n={self.n}, G={self.G}")
        if self.n % self.G != 0:
            raise DataError(f"n={self.n} is not divisible by G={self.G}")
        if not -1.0 < self.rho < 1.0:
            raise DataError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.control_kind not in ("continuous", "discrete"):
            raise DataError(f"unknown control kind '{self.control_kind}'")
        if self.d_assignment not in ("round_robin", "random"):
            raise DataError(f"unknown category assignment '{self.d_assignment}'")
        if self.variant == Variant.TWOWAY_FE:
            if self.T is None:
                object.__setattr__(self, "T", self.n // self.G)
            if self.G * self.T != self.n:
                raise DataError(f"two-way design needs n = G*T, got n={self.n}, G={self.G}, T={self.T}")
            if self.N_d is None or self.N_d < 1:
                raise DataError("two-way design needs N_d >= 1 categories")
        elif self.K < 1:
            raise DataError(f"design needs K >= 1 (intercept), got K={self.K}")

    @property
    def cluster_size(self) -> int:
        return self.n // self.G

    def to_dict(self) -> Dict:
        out = {
            "variant": self.variant.value,
            "n": self.n,
            "G": self.G,
            "rho": self.rho,
            "beta": self.beta,
        }
        if self.variant == Variant.TWOWAY_FE:
            out.update(T=self.T, N_d=self.N_d, d_assignment=self.d_assignment)
        else:
            out["K"] = self.K
        if self.variant == Variant.MANY_CONTROLS:
            out["control_kind"] = self.control_kind
        return out


@dataclass(frozen=True)
class Constants:
    kappa_x: Optional[float] = None
    kappa_u1: Optional[float] = None
    kappa_v: Optional[float] = None

    def to_dict(self) -> Dict:
        return {"kappa_x": self.kappa_x, "kappa_u1": self.kappa_u1, "kappa_v": self.kappa_v}


def t_clip(a):
    """t(a): identity on [-2, 2], 2*sgn(a) outside."""
    return np.clip(a, -2.0, 2.0)


def _norm_root(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.linalg.norm(z, axis=-1))


def g_fn(z: np.ndarray) -> np.ndarray:
    return np.exp(-_norm_root(z))


def h_fn(z: np.ndarray) -> np.ndarray:
    return np.exp(_norm_root(z))


# Power basis -----------------------------------------------------------------


def _basis_terms() -> Iterator[Tuple[int, ...]]:
    yield ()
    for k in range(N_Z):
        yield (k,)
    degree = 2
    while True:
        for k in range(N_Z):
            yield (k,) * degree
        for c in combinations_with_replacement(range(N_Z), degree):
            if len(set(c)) > 1:
                yield c
        degree += 1


def basis_terms(K: int) -> List[Tuple[int, ...]]:
    """First K monomials in graded order: intercept, linears, then per degree pure powers followed by products of distinct coordinates."""
    terms = []
    for term in _basis_terms():
        if len(terms) == K:
            break
        terms.append(term)
    return terms


def power_basis_prefix(z: np.ndarray, K: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z.reshape(1, -1) if single else z
    if Z.shape[1] != N_Z:
        raise DataError(f"power basis expects {N_Z} coordinates, got {Z.shape[1]}")
    if K < 1:
        raise ConfigError(f"basis size must be positive, got {K}")
    cols = [np.prod(Z[:, list(term)], axis=1) if term else np.ones(Z.shape[0]) for term in basis_terms(K)]
    out = np.column_stack(cols)
    return out[0] if single else out


def build_power_basis(z: np.ndarray, K: int) -> np.ndarray:
    if K not in BASIS_SIZES:
        raise ConfigError(f"unsupported basis size K={K}, expected one of {BASIS_SIZES}")
    return power_basis_prefix(z, K)


# Calibration -----------------------------------------------------------------


def _draw_controls(spec: DesignSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    if spec.control_kind == "discrete":
        body = (rng.standard_normal((size, spec.K - 1)) >= 1.0).astype(float)
    else:
        body = rng.uniform(-1.0, 1.0, (size, spec.K - 1))
    return np.column_stack([np.ones(size), body])


def _chunks(total: int, chunk: int) -> Iterator[int]:
    done = 0
    while done < total:
        step = min(chunk, total - done)
        yield step
        done += step


def calibrate_constants(
    spec: DesignSpec,
    rng: np.random.Generator,
    draws: int = CALIBRATION_DRAWS,
    chunk: int = CALIBRATION_CHUNK,
) -> Constants:
    """Pre-simulate the scale constants so Var[x] = Var[U_1] = 1."""
    if spec.variant == Variant.MANY_CONTROLS:
        s_list = []
        for size in _chunks(draws, chunk):
            s_list.append(_draw_controls(spec, rng, size).sum(axis=1))
        s = np.concatenate(s_list)
        kappa_x = 1.0 / np.mean(1.0 + s**2)
        x = np.sqrt(kappa_x * (1.0 + s**2)) * rng.standard_normal(s.shape[0])
        kappa_u1 = 1.0 / np.mean(1.0 + (t_clip(x) + s) ** 2)
        constants = Constants(kappa_x=kappa_x, kappa_u1=kappa_u1)

    elif spec.variant == Variant.PARTIALLY_LINEAR:
        z = rng.uniform(-1.0, 1.0, (draws, N_Z))
        s = z.sum(axis=1)
        h = h_fn(z)
        var_h = np.var(h)
        if var_h >= 1.0:
            raise DataError(f"Var[h(z)] = {var_h:.3f} leaves no room for unit-variance x")
        kappa_v = (1.0 - var_h) / np.mean(1.0 + s**2)
        x = h + np.sqrt(kappa_v * (1.0 + s**2)) * rng.standard_normal(draws)
        kappa_u1 = 1.0 / np.mean(1.0 + (t_clip(x) + s) ** 2)
        constants = Constants(kappa_u1=kappa_u1, kappa_v=kappa_v)

    else:
        z = rng.uniform(-1.0, 1.0, (draws, N_Z))
        s = z.sum(axis=1)
        kappa_x = 1.0 / np.mean(1.0 + s**2)
        x = np.sqrt(kappa_x * (1.0 + s**2)) * rng.standard_normal(draws)
        kappa_u1 = 1.0 / np.mean(1.0 + (t_clip(x) + s) ** 2)
        constants = Constants(kappa_x=kappa_x, kappa_u1=kappa_u1)

    logger.info(f"Calibrated {spec.variant.value} (K={spec.K}): {constants.to_dict()}")
    return constants


def analytic_kappa_x(spec: DesignSpec) -> float:
    """Closed form of kappa_x for the many-controls design."""
    m = spec.K - 1
    if spec.control_kind == "discrete":
        p = norm.sf(1.0)
        second_moment = m * p * (1 - p) + (1 + m * p) ** 2
    else:
        second_moment = 1.0 + m / 3.0
    return 1.0 / (1.0 + second_moment)


def analytic_kappa_v_ignoring_h() -> float:
    """1 / (1 + E[(iota'z)^2]) with E[(iota'z)^2] = 6/3; leaves out Var[h(z)]."""
    return 1.0 / (1.0 + N_Z / 3.0)


# Generators ------------------------------------------------------------------


def _switching_errors(
    switch: np.ndarray, sigma_u1: np.ndarray, rho: float, rng: np.random.Generator
) -> np.ndarray:
    """AR(1) within each row with coefficient +rho or -rho by the sign of ``switch``."""
    G, m = switch.shape
    eps = rng.standard_normal((G, m))
    U = np.empty((G, m))
    U[:, 0] = sigma_u1 * eps[:, 0]
    coef = np.where(switch >= 0.0, rho, -rho)
    for t in range(1, m):
        U[:, t] = coef[:, t] * U[:, t - 1] + eps[:, t]
    return U


def _cluster_ids(spec: DesignSpec) -> np.ndarray:
    return np.repeat(np.arange(spec.G), spec.cluster_size)


def gen_many_controls(
    spec: DesignSpec, rng: np.random.Generator, constants: Constants
) -> Tuple[Dataset, np.ndarray]:
    if spec.variant != Variant.MANY_CONTROLS:
        raise ConfigError(f"expected many_controls design, got {spec.variant.value}")
    G, m = spec.G, spec.cluster_size
    W = _draw_controls(spec, rng, spec.n)
    s = W.sum(axis=1)
    x = np.sqrt(constants.kappa_x * (1.0 + s**2)) * rng.standard_normal(spec.n)

    X2, S2 = x.reshape(G, m), s.reshape(G, m)
    sigma_u1 = np.sqrt(constants.kappa_u1 * (1.0 + (t_clip(X2[:, 0]) + S2[:, 0]) ** 2))
    U = _switching_errors(X2, sigma_u1, spec.rho, rng).reshape(-1)

    y = spec.beta * x + U
    data = Dataset(
        y=y,
        X=x.reshape(-1, 1),
        W=W,
        cluster_id=_cluster_ids(spec),
        x_names=("x",),
    )
    return data, U


def gen_partially_linear(
    spec: DesignSpec, rng: np.random.Generator, constants: Constants
) -> Tuple[Dataset, np.ndarray]:
    if spec.variant != Variant.PARTIALLY_LINEAR:
        raise ConfigError(f"expected partially_linear design, got {spec.variant.value}")
    G, m = spec.G, spec.cluster_size
    z = rng.uniform(-1.0, 1.0, (spec.n, N_Z))
    s = z.sum(axis=1)
    v = np.sqrt(constants.kappa_v * (1.0 + s**2)) * rng.standard_normal(spec.n)
    x = h_fn(z) + v

    sigma_u1 = np.sqrt(
        constants.kappa_u1 * (1.0 + (t_clip(x.reshape(G, m)[:, 0]) + s.reshape(G, m)[:, 0]) ** 2)
    )
    U = _switching_errors(z[:, 0].reshape(G, m), sigma_u1, spec.rho, rng).reshape(-1)

    y = spec.beta * x + g_fn(z) + U
    data = Dataset(
        y=y,
        X=x.reshape(-1, 1),
        W=power_basis_prefix(z, spec.K),
        cluster_id=_cluster_ids(spec),
        x_names=("x",),
    )
    return data, U


def _within(a: np.ndarray, G: int, T: int) -> np.ndarray:
    shaped = a.reshape(G, T, -1)
    return (shaped - shaped.mean(axis=1, keepdims=True)).reshape(a.shape)


def gen_twoway_fe(
    spec: DesignSpec, rng: np.random.Generator, constants: Constants
) -> Tuple[Dataset, np.ndarray]:
    """Panel with individual and category effects set to zero, individuals partialled out.

    Returns the within-transformed data with W the demeaned category dummies
    (last one dropped) and the within-transformed true errors.
    """
    if spec.variant != Variant.TWOWAY_FE:
        raise ConfigError(f"expected twoway_fe design, got {spec.variant.value}")
    G, T = spec.G, spec.T
    if T < 2:
        raise DataError("two-way design needs T >= 2; the within transformation annihilates a single period")
    n = spec.n
    z = rng.uniform(-1.0, 1.0, (n, N_Z))
    s = z.sum(axis=1)
    x = np.sqrt(constants.kappa_x * (1.0 + s**2)) * rng.standard_normal(n)
    sigma_u1 = np.sqrt(
        constants.kappa_u1 * (1.0 + (t_clip(x.reshape(G, T)[:, 0]) + s.reshape(G, T)[:, 0]) ** 2)
    )
    U = _switching_errors(x.reshape(G, T), sigma_u1, spec.rho, rng).reshape(-1)
    y = spec.beta * x + U

    if spec.d_assignment == "random":
        d = rng.integers(0, spec.N_d, size=n)
    else:
        d = np.arange(n) % spec.N_d
    dummies = np.zeros((n, spec.N_d))
    dummies[np.arange(n), d] = 1.0

    W = _within(dummies, G, T)[:, : spec.N_d - 1]
    data = Dataset(
        y=_within(y, G, T),
        X=_within(x, G, T).reshape(-1, 1),
        W=W,
        cluster_id=np.repeat(np.arange(G), T),
        x_names=("x",),
        w_names=tuple(f"d{k}" for k in range(spec.N_d - 1)),
    )
    return data, _within(U, G, T)


GENERATORS = {
    Variant.MANY_CONTROLS: gen_many_controls,
    Variant.PARTIALLY_LINEAR: gen_partially_linear,
    Variant.TWOWAY_FE: gen_twoway_fe,
}


def generate(
    spec: DesignSpec, rng: np.random.Generator, constants: Constants
) -> Tuple[Dataset, np.ndarray]:
    return GENERATORS[spec.variant](spec, rng, constants)


# Presets ---------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    design: DesignSpec
    reps: int = DEFAULT_REPS
    estimators: Tuple[str, ...] = ALL_ESTIMATORS
    kappa_norm: bool = False
    note: str = ""


COVERAGE_GROUPS = (175, 70, 35)
MANY_CONTROLS_K = {"0.001": 1, "0.101": 71, "0.201": 141, "0.301": 211, "0.401": 281}
PARTIALLY_LINEAR_K = {"0.001": 1, "0.019": 13, "0.049": 34, "0.129": 90, "0.309": 216}
TWOWAY_R = {"0.001": 700, "0.100": 10, "0.200": 5, "0.250": 4, "0.333": 3}

# kappa-norm grids: group label -> cluster size, with the n values printed per size
KAPPA_SIZES = {140: 5, 70: 10, 35: 20}
KAPPA_N = {5: (250, 500, 750, 1000), 10: (250, 500, 750, 1000), 20: (240, 500, 740, 1000)}
# the two-way grid at K/n = 1/3 uses n divisible by 3
KAPPA_N_THIRD = {5: (255, 510, 750, 1005), 10: (240, 510, 750, 990), 20: (240, 480, 720, 960)}
KAPPA_GRIDS = {
    "table6": (Variant.MANY_CONTROLS, "continuous", 0.2, KAPPA_N),
    "table7": (Variant.MANY_CONTROLS, "continuous", 0.3, KAPPA_N),
    "table8": (Variant.MANY_CONTROLS, "continuous", 0.4, KAPPA_N),
    "table9": (Variant.MANY_CONTROLS, "discrete", 0.2, KAPPA_N),
    "table10": (Variant.MANY_CONTROLS, "discrete", 0.3, KAPPA_N),
    "table11": (Variant.MANY_CONTROLS, "discrete", 0.4, KAPPA_N),
    "table12": (Variant.PARTIALLY_LINEAR, "continuous", 0.2, KAPPA_N),
    "table13": (Variant.PARTIALLY_LINEAR, "continuous", 0.3, KAPPA_N),
    "table14": (Variant.PARTIALLY_LINEAR, "continuous", 0.4, KAPPA_N),
    "twoway_kappa:K0.200": (Variant.TWOWAY_FE, "continuous", 0.2, KAPPA_N),
    "twoway_kappa:K0.333": (Variant.TWOWAY_FE, "continuous", 1.0 / 3.0, KAPPA_N_THIRD),
}


def _coverage_presets() -> Dict[str, Preset]:
    out = {}
    n = SIM_BUDGET_N
    for G in COVERAGE_GROUPS:
        for family, kind in (("table2", "continuous"), ("table3", "discrete")):
            for label, K in MANY_CONTROLS_K.items():
                name = f"{family}:G{G}:K{label}"
                out[name] = Preset(name, DesignSpec(Variant.MANY_CONTROLS, n, G, K=K, control_kind=kind))
        for label, K in PARTIALLY_LINEAR_K.items():
            name = f"table4:G{G}:K{label}"
            out[name] = Preset(name, DesignSpec(Variant.PARTIALLY_LINEAR, n, G, K=K))
        for label, r in TWOWAY_R.items():
            name = f"table5:G{G}:K{label}"
            out[name] = Preset(
                name,
                DesignSpec(Variant.TWOWAY_FE, n, G, T=n // G, N_d=n // r),
            )
    return out


def _kappa_presets() -> Dict[str, Preset]:
    out = {}
    for family, (variant, kind, ratio, n_table) in KAPPA_GRIDS.items():
        for label, size in KAPPA_SIZES.items():
            for n in n_table[size]:
                G = n // size
                k = int(round(ratio * n))
                if variant == Variant.TWOWAY_FE:
                    design = DesignSpec(variant, n, G, T=size, N_d=k + 1)
                else:
                    design = DesignSpec(variant, n, G, K=k, control_kind=kind)
                name = f"{family}:G{label}:n{n}"
                out[name] = Preset(name, design, estimators=("cr",), kappa_norm=True)
    return out


PRESETS: Dict[str, Preset] = {**_coverage_presets(), **_kappa_presets()}


def list_presets() -> List[str]:
    return list(PRESETS)


def get_preset(name: str) -> Preset:
    preset = PRESETS.get(name)
    if preset is None:
        raise ConfigError(f"unknown preset '{name}' (see simulate --list-presets)")
    return preset


def with_overrides(spec: DesignSpec, **changes) -> DesignSpec:
    changes = {k: v for k, v in changes.items() if v is not None}
    if spec.variant == Variant.TWOWAY_FE and ("n" in changes or "G" in changes):
        changes.setdefault("T", None)
    return replace(spec, **changes) if changes else spec
