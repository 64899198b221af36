MIX_ALPHA = 0.2
CONSISTENCY_WEIGHT = 1.0
SPARSITY_WEIGHT = 0.01
# regression pairing threshold, in units of the target standard deviation
PAIRING_DELTA_FACTOR = 0.1
KL_FLOOR = 1e-12
DISCREPANCIES = [
    'l1',
    'kl',
]

METHODS = [
    'erm',
    'mixup',
    'dre',
]
ABLATION_METHODS = {
    'dre-no-sparsity': {'gamma': 0.0},
    'dre-no-consistency': {'lambda': 0.0},
}
BASELINE_METHOD = 'erm'

TRAIN_STEPS = 5000
LEARNING_RATE = 1e-3
BATCH_SIZE = 32
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 10.0
VALIDATION_INTERVAL = 100
TRAIN_FRACTION = 0.8

EXPLAINERS = [
    'input_gradient',
    'grad_cam',
]
IAUC_MAX_STEPS = 50
IAUC_MIN_LOGIT = 1e-6
BLUR_SIGMA = 2.0
BLUR_SIZE = 5
DEC_PAIRS = 200
IAUC_SAMPLES = 100
SC_SAMPLES = 500
DUMP_SAMPLES = 2
# ulp nudges allowed when pinning the baseline DEC mean to 1
MEAN_PIN_STEPS = 10000

TRAIN_RHOS = [0.95, 0.9, 0.8]
TEST_RHO = -0.9
SAMPLES_PER_ENV = 2000
D_CORE = 5
D_SPUR = 5
D_NOISE = 10
IMAGE_SIZE = 16
NOISE_SIGMA = 0.3
# spread of the per-environment offset of the spurious features, the test environment sits at 0
ENV_SHIFT = 1.0
TEST_ENV_ID = 'test'
# teacher network of the tabular generators
TEACHER_HIDDEN = 8
TEACHER_GAIN = 0.5

BUNDLE_MAGIC = 'DRELAB-BUNDLE'
BUNDLE_VERSION = 1
PARAMS_MAGIC = 'DRELAB-PARAMS'
PARAMS_VERSION = 1

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3

LOG_FILE = 'drelab.log'
