"""
Holds all app level constants here.

Toy-scale defaults for the detector, the alignment heads and the training
schedule. Anything a run can override is mirrored in ``TrainConfig``.
"""

# Detector
BACKBONE_STRIDE = 8
BACKBONE_CHANNELS = 128
HIDDEN_DIM = 64
ENCODER_LAYERS = 2
DECODER_LAYERS = 2
NUM_HEADS = 4
NUM_POINTS = 4
NUM_QUERIES = 20
FFN_DIM = 128
DROPOUT = 0.0
MIN_IMAGE_SIZE = 32

# Shape classes, 1-based categories. Class index inside the model is category - 1
# and the extra last index is "no object".
SHAPE_CATEGORIES = {
    1: "circle",
    2: "square",
    3: "triangle",
}
NUM_FOREGROUND_CLASSES = len(SHAPE_CATEGORIES)

# Detection loss / matching cost
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
NO_OBJECT_WEIGHT = 0.1

# Alignment
LOG_EPSILON = 1e-7
DISCRIMINATOR_HIDDEN = 256
GRL_SCALE = 1.0

SOURCE_LABEL = 1
TARGET_LABEL = 0

MODE_SOURCE_ONLY = "source_only"
MODE_TA = "ta"
MODE_SPATA = "spata"
MODE_SEMTA = "semta"
MODE_SSTA = "ssta"
ALIGNMENT_MODES = (MODE_TA, MODE_SPATA, MODE_SEMTA, MODE_SSTA)
TRAINING_MODES = (MODE_SOURCE_ONLY,) + ALIGNMENT_MODES

TAP_CNN = "cnn"
TAP_ENCODER = "encoder"

# Training schedule
TRADE_OFF = 1.0
LEARNING_RATE = 1e-4
LR_DECAY_FACTOR = 0.1
LR_DECAY_EPOCH = 40
EPOCHS = 50
WARMUP_EPOCHS = 5
BATCH_SIZE = 2
CLIP_MAX_NORM = 0.1
SEED = 0

# Trade-off / learning-rate pairs per adaptation scenario. The fog setting runs a
# larger trade-off; the synthetic-to-real and scene settings use a small one and
# a quarter of the learning rate.
TRAINING_PRESETS = {
    "weather": {"trade_off": 1.0, "learning_rate": 1e-4},
    "syn2real": {"trade_off": 0.01, "learning_rate": 2.5e-5},
    "scene": {"trade_off": 0.01, "learning_rate": 2.5e-5},
}

# Evaluation
IOU_THRESHOLD = 0.5

DOMAINS = ("source", "target")
SPLITS = ("train", "val")

# Synthetic scenes
IMAGE_SIZE = (64, 64)
OBJECT_COUNT_RANGE = (1, 5)
OBJECT_SIZE_RANGE = (10, 20)
MIN_SEPARATION = 2
PLACEMENT_RETRIES = 200
BACKGROUND_RANGE = (20, 90)
SHAPE_PALETTE = (
    (230, 60, 60),
    (60, 200, 80),
    (70, 110, 240),
    (240, 200, 50),
    (200, 80, 220),
    (60, 210, 210),
)

# Fog-like corruptions: blur radius in pixels, haze blend toward white, noise std.
SHIFT_PRESETS = {
    "none": {"blur_radius": 0, "haze": 0.0, "noise_std": 0.0},
    "light_fog": {"blur_radius": 1, "haze": 0.25, "noise_std": 0.01},
    "fog": {"blur_radius": 2, "haze": 0.45, "noise_std": 0.03},
    "heavy_fog": {"blur_radius": 3, "haze": 0.65, "noise_std": 0.05},
}

# On-disk layout
ANNOTATIONS_FILENAME = "annotations.jsonl"
IMAGES_DIRNAME = "images"
CHECKPOINT_FILENAME = "checkpoint.pt"
SIDECAR_FILENAME = "checkpoint.json"
METRICS_FILENAME = "metrics.csv"
REPORT_FILENAME = "report.json"
METRICS_HEADER = ("epoch", "l_det", "l_da_c", "l_da_e", "total")

# CLI exit codes
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
