import os

# --- Image geometry ---
INPUT_SIZE = 512
IMAGE_CHANNELS = 3
DOWNSAMPLING_STEPS = 6  # 512 -> 8
SIZE_DIVISOR = 2 ** DOWNSAMPLING_STEPS

# --- Age conditioning ---
MIN_AGE = 1.0
MAX_AGE = 120.0
AGE_SCALE = 120.0  # ages are divided by this before entering a network or an L2 term

# --- FAG-Net defaults ---
FAGNET_BASE_FILTERS = 32
FAGNET_ATTENTION_KERNEL = 5
FAGNET_TAIL_FILTERS = 1024
FAGNET_DROPOUT_RATES = (0.9, 0.8, 0.5)
FAGNET_FC_SIZES = (512, 256, 128)
FAGNET_AGE_CENTER = 50.0
FAGNET_AGE_SCALE = 30.0

# --- FGC-Net defaults ---
FGCNET_STEM_FILTERS = 24
FGCNET_INPUT_KERNELS = (1, 3, 5, 7)
FGCNET_LATENT_DIM = 64
FGCNET_LABEL_HIDDEN = 64
FGCNET_DISC_FILTERS = 16
FGCNET_DISC_FC_SIZES = (512, 256, 128)
FGCNET_DISC_DROPOUT_RATES = (0.8, 0.7, 0.6)
SIGMA_FLOOR = 1e-6
LOG_SIGMA_LIMIT = 10.0

# --- Losses ---
LOSS_PSI = 1.0
LOSS_VARPHI = 0.1
LOSS_J = 3
VARPHI_RANGE = (0.0001, 0.3)
KL_VARIANTS = ("paper", "standard")
EPS_VARIANTS = ("paper", "standard")
F1_VARIANTS = ("paper", "standard")

# --- Training protocol ---
INITIAL_LR = 0.001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
LR_DECAY_FACTOR = 0.1
LR_DECAY_EVERY = 50
BATCH_SIZE = 16
MAX_EPOCHS = 500
EARLY_STOP_PATIENCE = 20
WEIGHT_DECAY = 1e-5
NUM_FOLDS = 5
VAL_FRACTION = 0.1
CHECKPOINT_EVERY = 10
DEFAULT_SEED = 42

# --- Evaluation column sets ---
CS_THRESHOLDS = (0, 1, 2, 3, 4, 5)
MCS_LEVELS = (2, 3, 4)
POSITIVE_GENDER = "male"
GENDERS = ("female", "male")  # index == gender-head class index

# --- Dataset tables ---
MANIFEST_COLUMNS = ["image_path", "age_years", "gender", "subject_id", "split", "source"]
TRUTH_COLUMNS = ["image_path", "age_years", "disc_cx", "disc_cy", "disc_r"]
SPLITS = ("train", "val", "test", "unassigned")
AGE_PREDICTION_COLUMNS = ["sample_id", "actual_age", "predicted_age"]
GENDER_PREDICTION_COLUMNS = ["sample_id", "actual_gender", "predicted_gender"]

SEX_TOKENS = {
    "female": "female", "f": "female", "woman": "female", "w": "female",
    "male": "male", "m": "male", "man": "male",
}

ODIR_COLUMNS = {
    "image_columns": ["Left-Fundus", "Right-Fundus"],
    "age_column": "Patient Age",
    "sex_column": "Patient Sex",
    "subject_column": "ID",
}
PAPILA_COLUMNS = {
    "image_columns": ["image"],
    "age_column": "Age",
    "sex_column": "Gender",
    "subject_column": "ID",
}
TEN_YEAR_COLUMNS = {
    "image_columns": ["image"],
    "age_column": "age",
    "sex_column": "sex",
    "subject_column": "subject",
}

# --- Run directory layout ---
RUNS_DIR = os.environ.get("FUNDUS_LAB_RUNS_DIR", "runs")
MANIFEST_FILE = "manifest.csv"
TRUTH_FILE = "truth.csv"
CONFIG_SNAPSHOT_FILE = "config.snapshot"
BEST_CHECKPOINT_FILE = "best.ckpt"
HISTORY_FILE = "history.csv"
EVAL_FILE = "eval.csv"
LOG_FILE = "fundus_lab.log"
TABLE_DECIMALS = 3
