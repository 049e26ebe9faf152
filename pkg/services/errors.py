"""Error hierarchy shared by the services and the command layer.

Each family carries the process exit code the CLI maps it to.
"""


class ClusterRobustError(Exception):
    exit_code = 1


class ConfigError(ClusterRobustError):
    """Bad flags, presets, restrictions or transform specs."""

    exit_code = 2


class InvalidRestrictionError(ConfigError):
    pass


class DataError(ClusterRobustError):
    """Input data or design specification cannot be used."""

    exit_code = 3


class NumericalError(ClusterRobustError):
    exit_code = 4


class SaturatedControlsError(NumericalError):
    def __init__(self, k_eff: int, n: int):
        super().__init__(
            f"saturated controls: effective rank {k_eff} >= n={n}, M = 0 and no inference is possible"
        )
        self.k_eff = k_eff
        self.n = n


class CollinearRegressorsError(NumericalError):
    def __init__(self, detail: str = ""):
        msg = "regressors of interest collinear with controls"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class SingularSystemError(NumericalError):
    HINT = (
        "the system is not invertible when the controls include (or span) "
        "a full set of cluster indicators; drop cluster-level controls or "
        "absorb them differently"
    )

    def __init__(self, detail: str):
        super().__init__(
            f"correction system singular or ill-conditioned: {detail}. Hint: {self.HINT}"
        )


class IndefiniteVarianceError(NumericalError):
    def __init__(self, coordinate: int, name: str, value: float):
        super().__init__(
            f"indefinite variance estimate: Omega[{coordinate},{coordinate}] = {value:.6g} "
            f"for '{name}' is not positive, standard error undefined"
        )
        self.coordinate = coordinate
        self.name = name
        self.value = value
