import os
from dotenv import load_dotenv

load_dotenv()

# Logging / runtime
LOG_LEVEL = os.getenv("CLUSTER_ROBUST_LOG_LEVEL", "INFO").upper()
THREADS = int(os.getenv("CLUSTER_ROBUST_THREADS", "0")) or (os.cpu_count() or 1)
DL_DATA_PATH = os.getenv("CLUSTER_ROBUST_DL_DATA", "")

# Annihilator construction
DEFAULT_RANK_TOL = 1e-10  # relative to the largest pivot of the QR factor
DENSE_M_CACHE_MAX_N = 5000  # dense M is cached only up to this many observations
COLLINEARITY_TOL = 1e-8  # smallest singular value of MX with unit-norm X columns

# Correction system
DENSE_SYSTEM_MAX_L = 4000  # auto mode switches to matrix-free CG above this
SYSTEM_RCOND_MIN = 1e-10  # Cholesky pivot ratio below which the system is singular
CG_TOL = 1e-10
CG_MAX_ITER_FACTOR = 10  # max_iter = factor * L
KAPPA_NORM_EXACT_MAX_L = 2000  # kappa norm uses the estimator above this
DENSE_BUILD_CHUNK = 512  # rows of the dense system assembled per block

# Fixed-effect absorption
ABSORB_TOL = 1e-10  # max change per sweep, relative to the largest entry
ABSORB_MAX_ITER = 1000
MAX_POWER = 5
MAX_TREND_DEGREE = 2

# Inference
DEFAULT_ALPHA = 0.05
ESTIMATORS = ("lz", "cr")
ALL_ESTIMATORS = ("unf", "lz", "cr")

# Simulation
DEFAULT_SEED = 20240101
DEFAULT_RHO = 0.3
DEFAULT_BETA = 1.0
CALIBRATION_DRAWS = 200_000
CALIBRATION_CHUNK = 50_000
CALIBRATION_SPAWN_KEY = 2**31 - 1  # reserved stream, never used by a replication
DEFAULT_REPS = 250
MC_LOG_EVERY = 100
SIM_BUDGET_N = 700  # sample size of the coverage designs

# Output
JSON_SCHEMA_VERSION = 1
TEXT_FLOAT_FORMAT = "{:.6g}"
OUTPUT_FORMATS = ("json", "text", "csv")

# Oracle check
ORACLE_MAX_N = 16
ORACLE_TOL = 1e-12  # entrywise system comparisons
ORACLE_SIGMA_RTOL = 1e-8  # explicit-inverse meat vs solved meat
