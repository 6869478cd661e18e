# Solver
SOLVER = "CLARABEL"  # Any conic solver installed for cvxpy with SDP support, e.g. "SCS" or "MOSEK"
SOLVER_FEAS_TOL = 1e-8
SOLVER_GAP_TOL = 1e-8
SOLVER_MAX_ITER = 500
SOLVER_TOL_ENV_VAR = "CCOPF_SOLVER_TOL"

# Relaxation diagnostics
RANK_THRESHOLD = 1e5  # Eigenvalue ratio above which a solution matrix is treated as rank-1
EIGEN_FLOOR = 1e-14  # Relative to the largest eigenvalue
PSD_TOLERANCE = 1e-7

# Uncertainty sets
EPSILON = 0.05
BETA = 1e-3
EIGVAL_FLOOR = 1e-12

# Corrective control
DEFAULT_COS_PHI = 0.95
PTDF_COS_PHI = 1.0

# Newton-Raphson power flow
PF_TOL = 1e-8
PF_MAX_ITER = 20
PF_MAX_OUTER = 10

# Violation thresholds
GEN_THRESHOLD_PU = 1e-3
RELATIVE_THRESHOLD = 1e-3  # 0.1% for voltages and line flows

# Monte Carlo
MC_SAMPLES = 10_000
MC_SHARD_SIZE = 250
MC_MAX_NONCONVERGED = 0.05

# Penalty sweep grids, as (start, stop, step)
SWEEP_RECT_24 = (0.0, 500.0, 25.0)
SWEEP_GAUSS_24 = (0.0, 200.0, 10.0)
