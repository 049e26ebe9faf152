HELP_TEXT = (
    "ESTIMATION\n"
    "  fit           Partialled-out OLS with LZ and CR cluster-robust standard errors\n"
    "  diagnose      Design diagnostics (K/n, leverage, correction-system size) only\n\n"
    "SIMULATION\n"
    "  simulate      Monte Carlo bias and coverage study for a preset or explicit design\n\n"
    "VALIDATION\n"
    "  oracle-check  Compare the correction system with a brute-force Kronecker product\n\n"
    "Exit codes: 0 success, 1 unexpected failure or failed oracle check, 2 configuration error,\n"
    "3 data error, 4 numerical failure (singular system, indefinite variance)."
)


def get_command_list():
    return [
        ("fit", "Estimate coefficients with cluster-robust inference"),
        ("diagnose", "Report design diagnostics without variance estimation"),
        ("simulate", "Run a Monte Carlo study"),
        ("oracle-check", "Check the correction system against a Kronecker oracle"),
    ]
