from enum import Enum


class CompressorFamily(str, Enum):
    TOP_K = "top_k"
    SCALED_SIGN = "scaled_sign"
    IDENTITY = "identity"


class TaskKind(str, Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


class QuadraticPreset(str, Enum):
    # A_k = I, b_k = ±h·e_1 alternating over clients
    SHIFTED_IDENTITY = "shifted_identity"
    # Gaussian design rows, per-client planted minimizers
    RANDOM = "random"


class AlphaRule(str, Enum):
    CONSTANT = "constant"
    LINEAR_DECAY = "linear_decay"
    THEORY_OPTIMAL = "theory_optimal"


class LocalLrDecay(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    STEP = "step"


class BoundKind(str, Enum):
    LOCAL_DRIFT = "local_drift"
    SECOND_MOMENT = "second_moment"
    RESIDUAL_RECURSION = "residual_recursion"
    PP_RESIDUAL_RECURSION = "pp_residual_recursion"
    STATIONARITY = "stationarity"


class Purpose(int, Enum):
    """Tags that separate independent random streams sharing one root seed."""
    MINIBATCH = 1
    PARTICIPATION = 2
    TASK = 3
    PARTITION = 4
    PROBE = 5
    POWER_ITERATION = 6
    DISSIMILARITY = 7
    NOISE = 8
    INIT = 9
    FUZZ = 10


class RunStatus(str, Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"
    FAILED = "failed"


# Defaults used in the main experiments
DEFAULT_ALPHA = 0.85
DEFAULT_SERVER_LR = 1.0
DEFAULT_LOCAL_STEPS = 5
DEFAULT_PARTICIPATION = 1.0
DEFAULT_VALUE_BITS = 32
DEFAULT_CLIENTS = 100
DEFAULT_ROUNDS = 200

# Relative tolerances
POWER_ITERATION_TOL = 1e-6
POWER_ITERATION_MAX_STEPS = 10_000
IDENTITY_DEFECT_TOL = 1e-9

# 2**63 bits is where the cumulative counter stops being representable as int64
UPLINK_BITS_LIMIT = 2**63

METRICS_COLUMNS = (
    "round",
    "f_w",
    "grad_norm_sq",
    "residual_energy_mean",
    "mismatch",
    "uplink_bits_cum",
    "virtual_identity_residual",
    "wall_time_ms",
)

FAILURE_MARKER = "FAILED"
METRICS_FILENAME = "metrics.csv"
SUMMARY_FILENAME = "summary.yaml"
CONFIG_FILENAME = "config.yaml"

# Step-ahead coefficients swept by `sweep-alpha` and the alpha-sweep check
ALPHA_GRID = [round(0.1 * i, 1) for i in range(11)]
