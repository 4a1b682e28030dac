"""Numerical tolerances and experiment defaults, in one place."""

# decomposition-level checks (reconstruction, orthonormality, Eckart-Young)
DECOMP_TOL = 1e-8
# incremental extension vs direct truncation
INCREMENTAL_TOL = 1e-6
# softmax rows
ROW_SUM_TOL = 1e-9
# reward decomposition identity
REWARD_TOL = 1e-12
# finite-difference gradient check
GRAD_FD_STEP = 1e-5
GRAD_REL_TOL = 1e-4

# power iteration
POWER_ITERATIONS = 3

# rank bounds used in the experiments
R_MIN = 16
R_MAX = 64
FIXED_RANK = 32
ENERGY_THRESHOLD = 0.90

# declared FLOPs model
SVD_OVERHEAD_COEFF = 6.0

# reward and safety defaults
ALPHA = 1.0
BETA = 0.5
GAMMA = 0.02
EPSILON0 = 1.0
DECAY = 0.001
RANK_STEP = 4

# spectra above this size come from block iteration instead of a dense SVD
DENSE_SPECTRUM_MAX_N = 1024
