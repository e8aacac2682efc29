from pathlib import Path

OUT_DIR_ENV_VAR = "SLUICE_OUT_DIR"
THREADS_ENV_VAR = "SLUICE_THREADS"
DEFAULT_OUT_DIR = Path.cwd() / "sluice-runs"

CHECKPOINT_MAGIC = b"FFDC1"
MASK_NEG = -1e30
LN_EPS = 1e-5

ARENA_LOW = 0.0
ARENA_HIGH = 1.0
MAX_DELTA = 0.05
GRASP_RADIUS = 0.03
CONTACT_RADIUS = 0.15
GRIPPER_DIM = 2
ACTION_DIM = 3
RAW_FEATURE_DIM = 9
LATENT_DIM = 16
PROJECTION_SEED = 20240917


class TaskIds:

    TRANSPORT_EASY = "transport-easy"
    INSERT_HARD = "insert-hard"


TASK_IDS = [TaskIds.TRANSPORT_EASY, TaskIds.INSERT_HARD]
HARD_TASKS = {TaskIds.INSERT_HARD}


class Settings:

    CLEAN = "clean"
    RANDOM = "random"


class Phases:

    TRANSPORT = "transport"
    CONTACT = "contact"


class Provenance:

    DEMO_POS = "demo_pos"
    ROLLOUT_POS = "rollout_pos"
    ROLLOUT_NEG = "rollout_neg"
    CORRUPT_SWAP = "corrupt_swap"
    CORRUPT_FLIP = "corrupt_flip"
    CORRUPT_NOISE = "corrupt_noise"
    CORRUPT_TAIL = "corrupt_tail"

    ALL = [
        DEMO_POS,
        ROLLOUT_POS,
        ROLLOUT_NEG,
        CORRUPT_SWAP,
        CORRUPT_FLIP,
        CORRUPT_NOISE,
        CORRUPT_TAIL,
    ]


POSITIVE_PROVENANCE = {Provenance.DEMO_POS, Provenance.ROLLOUT_POS}
CORRUPT_PROVENANCE = Provenance.ALL[3:]


class Ablations:

    FULL = "full"
    NO_UND = "no_und"
    NO_PRED = "no_pred"
    NO_REAL = "no_real"
    NO_ACTION = "no_action"


ABLATIONS = [
    Ablations.FULL,
    Ablations.NO_UND,
    Ablations.NO_PRED,
    Ablations.NO_REAL,
    Ablations.NO_ACTION,
]


class MaskModes:

    CACHE_COMPATIBLE = "cache_compatible"
    FULL_FIDELITY = "full_fidelity"


class Stages:

    DEMOS = "demos"
    WAM = "wam"
    VERDATA = "verdata"
    VERIFIER = "verifier"
    BENCHMARK = "benchmark"


DEMOS_FILE = "demos.jsonl"
WAM_FILE = "wam.ffdc"
BASE_WAM_FILE = "wam-h{}.ffdc"
VERDATA_FILE = "verdata.jsonl"
VERIFIER_FILE = "verifier.ffdc"
EPISODES_FILE = "episodes.jsonl"
SUMMARY_FILE = "summary.csv"
FRONTIER_FILE = "frontier.svg"
TIMELINE_FILE = "timeline.svg"
TABLE_FILE = "table.txt"
SNAPSHOT_FILE = "config.snapshot.json"
CONTEXT_YAML = "context.yaml"
