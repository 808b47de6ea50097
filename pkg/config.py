import os

# Run defaults (every key can be overridden in the run config JSON)
DEFAULT_METHOD = "SPACE"
DEFAULT_N_P = 10.0
DEFAULT_N_PCA = 30
DEFAULT_TCAV_REPETITIONS = 20
DEFAULT_N_RANDOM_CONCEPTS = 20
DEFAULT_ALPHA = 0.05
DEFAULT_SEED = int(os.getenv('SPACE_SEED', 0))
DEFAULT_MIN_CONCEPT_SIZE = 4

# Layer names of the analytic backend
DEFAULT_LAYER_GRADCAM = 'conv'
DEFAULT_LAYER_ACTIV = 'pool'

# OPTICS
DEFAULT_OPTICS_MIN_SAMPLES = 5
DEFAULT_OPTICS_XI = 0.05
# Edge members of a cluster whose density distance exceeds this multiple of
# the cluster median are noise
OPTICS_EDGE_RATIO = 8.0
# A cluster must be reached across at least this multiple of its largest
# inner reachability
OPTICS_MIN_SEPARATION = 2.0

# Random concepts: set size is the median concept size, never below this
MIN_RANDOM_SET_SIZE = 10

# CAV training (plain gradient descent on the logistic loss)
CAV_STEPS = 1000
CAV_LEARNING_RATE = 0.01
CAV_DEGENERATE_NORM = 1e-12

# ACE baseline
DEFAULT_N_SLIC = [15, 50, 80]
DEFAULT_N_K = 25
DEFAULT_COMPACTNESS = 20.0
DEFAULT_SIGMA = 1.0
DEFAULT_PAD_VALUE = 128
DEFAULT_KMEANS_RESTARTS = 3
SLIC_MAX_ITERATIONS = 10
KMEANS_MAX_ITERATIONS = 100
KMEANS_TOLERANCE = 1e-6

# Model backend
DEFAULT_BACKEND = os.getenv('SPACE_BACKEND', 'analytic-blob')
DEFAULT_INPUT_SIDE = int(os.getenv('SPACE_INPUT_SIDE', 72))
SPOOL_TIMEOUT = float(os.getenv('SPACE_SPOOL_TIMEOUT', 60))
SPOOL_POLL_INTERVAL = 0.01

# Output
DEFAULT_OUTPUT_DIR = os.getenv('SPACE_OUTPUT_DIR', 'space_output')
MAX_EXAMPLES_PER_CONCEPT = 40
DEFAULT_WORKERS = 1
