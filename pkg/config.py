# DEFAULT PARAMETERS FOR THE NORMALIZERS AND THE TRAINING HARNESS
# Experiment files (configs/*.json) override anything below.

# NUMERICS
EPS = 1e-5
# running statistics decay for inference: running = RHO * running + (1 - RHO) * new
RUNNING_DECAY = 0.9

# CROSS-ITERATION WINDOW
MAX_WINDOW = 8
# effective examples at which plain BN statistics saturate
SATURATION_EXAMPLES = 16
# BURN-IN IS GIVEN IN EPOCHS AND CONVERTED TO ITERATIONS AT STARTUP
BURN_IN_EPOCHS = 1
TAYLOR_BACKPROP = True

# OPTIMIZER
BASE_LR = 0.1
# learning rate is scaled linearly by batch_size / LR_REFERENCE_BATCH
LR_REFERENCE_BATCH = 32
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
LR_SCHEDULE = "cosine"
STEP_DECAY_FACTOR = 0.1

# DATASETS
# per-dataset (mean, std) per channel, applied after scaling pixels to [0, 1]
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD_BYTES = 3073
CIFAR10_IMAGE_SHAPE = (3, 32, 32)
CROP_PADDING = 4

# OUTPUT
METRICS_FILENAME = "metrics.csv"
CHECKPOINT_FILENAME = "checkpoint.pkl"
CONFIG_FILENAME = "config.json"
SUMMARY_FILENAME = "summary.csv"
DIAGNOSE_FILENAME = "diagnose.json"
CHECKPOINT_MAGIC = b"CBNCKPT\x00"
CHECKPOINT_VERSION = 1
# floats are written with this many significant digits
FLOAT_DIGITS = 17

# ORACLES
# naive statistic Jacobians are refused above this many entries
JACOBIAN_MAX_ENTRIES = 1_000_000
FINITE_DIFF_STEP = 1e-5
GRAD_RATIO_PROBES = 16
