from dotenv import load_dotenv
from pathlib import Path
import os
from typing import Dict


load_dotenv()

VERSION = "0.1.0"
SCHEMA_VERSION = 1

MNIST_DIR = Path(os.environ.get("FEDXRAY_MNIST_DIR", Path.cwd() / "data" / "mnist"))
MNIST_FILES: Dict[str, str] = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801

# FL system defaults
NUM_CLIENTS = 200
CLIENTS_PER_ROUND = 30
MALICIOUS_FRACTION = 0.2
ADAPTIVE_MALICIOUS_FRACTION = 0.4
GLOBAL_ITERATIONS = 100
LOCAL_ITERATIONS = 1
BATCH_SIZE = 32
LEARNING_RATE = 0.001
LEARNING_RATE_DECAY = 0.998
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
DIRICHLET_ALPHA = 0.5
WARM_UP_ROUNDS = 10

# aggregators
NDC_DELTA = 2.0
RSA_BETA = 5e-5
RSA_BETA_DECAY = 0.998
RFA_SMOOTHING = 0.1
RFA_TOLERANCE = 1e-5
RFA_MAX_ROUNDS = 500
GLOBAL_LEARNING_RATE = 1.0
MIN_CLUSTER_SIZE = 2
MIN_SAMPLES = 1
SINGLE_CLUSTER_OUTLIER_FACTOR = 5.0
# SLOUs closer than this are treated as the same point
DUPLICATE_TOLERANCE = 1e-12

# attacks
PGD_EPSILON = 5e-2
SMP_RHO1 = 10.0
SMP_RHO2 = 1e-4
POISON_FRACTION = 0.3
TRIGGER_BLOCK_SIZE = 3
TRIGGER_CORNER = "bottom-right"
TRIGGER_VALUE = 1.0
TARGET_LABEL = 0
TAIL_QUANTILE = 0.95
TAIL_SHIFT = 3.0
LAMBDA_INIT = 1.0
LAMBDA_FLOOR = 1e-10

# synthetic data
SYNTHETIC_CLASSES = 10
SYNTHETIC_PER_CLASS = 200
SYNTHETIC_DIM = 20
SYNTHETIC_SEPARATION = 6.0
SYNTHETIC_TEST_FRACTION = 0.2

AGGREGATORS = ("fedavg", "ndc", "rsa", "rfa", "krum", "multi-krum", "xmam")
ATTACK_KINDS = ("none", "trigger", "subpopulation", "krum-attack", "xmam-attack")
ATTACK_MODES = ("blackbox", "pgd", "smp")
TRIGGER_CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")

METRICS_COLUMNS = [
    "iteration",
    "test_error",
    "attack_success_rate",
    "preserved_count",
    "screening_seconds",
    "preserved_ids",
]

# R: Weiszfeld rounds for rfa, hierarchy passes while condensing for xmam
SCREENING_COMPLEXITY: Dict[str, str] = {
    "fedavg": "0",
    "ndc": "O(tau*zeta)",
    "rsa": "O(tau*zeta)",
    "rfa": "O(tau*zeta*R)",
    "krum": "O(tau^2*zeta)",
    "multi-krum": "O(tau^2*zeta)",
    "xmam": "O(tau^2*M*R)",
}
