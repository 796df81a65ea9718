import struct
from dataclasses import replace
from itertools import combinations
from pathlib import Path
import gzip

import numpy as np

from fedxray.aggregation import AggregatorConfig
from fedxray.attacks import AttackConfig
from fedxray.constants import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from fedxray.data import ClientShard, Dataset
from fedxray.network import Conv2d, Flatten, FullyConnected, MaxPool2d, NetworkSpec, ReLU, Softmax
from fedxray.simulation import DataConfig, ExperimentConfig, OutputConfig

TEST_SEED = 1234


def grad_check_spec() -> NetworkSpec:
    """Every trainable layer type on a small input: 57 conv + 143 FC = 200 parameters."""
    return NetworkSpec(
        layers=(Conv2d(2, 3, 3), ReLU(), MaxPool2d(2), Flatten(), FullyConnected(12, 11), Softmax()),
        input_shape=(2, 6, 6),
        num_classes=11,
        name="grad-check",
    )


def central_difference(f, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(params)
    for i in range(len(params)):
        step = h * max(1.0, abs(params[i]))
        up, down = params.copy(), params.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2 * step)
    return grad


def one_hot_dataset(labels, num_classes: int, scale: float = 1.0) -> Dataset:
    """Inputs (n, 1, 1, M) holding scale * one_hot(label)."""
    labels = np.asarray(labels, dtype=np.int64)
    inputs = scale * np.eye(num_classes)[labels]
    return Dataset(inputs.reshape(len(labels), 1, 1, num_classes), labels, num_classes, "one-hot")


def indexed_dataset(n: int, num_classes: int, seed: int = TEST_SEED) -> Dataset:
    """inputs[i] == i so that tests can tell which examples went where."""
    labels = np.random.default_rng(seed).integers(0, num_classes, size=n)
    return Dataset(np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1), labels, num_classes, "indexed")


def example_ids(data: Dataset) -> np.ndarray:
    return data.inputs.reshape(len(data), -1)[:, 0].astype(np.int64)


def logit_update(logits) -> np.ndarray:
    """Update of single_fc(1, M) whose SLOU on the all-ones probe is softmax(logits): zero weights, bias = logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.concatenate([np.zeros(len(logits)), logits])


def constant_class_params(spec: NetworkSpec, label: int) -> np.ndarray:
    """single_fc parameters that predict `label` for every input."""
    params = np.zeros(spec.num_params)
    params[spec.num_params - spec.num_classes + label] = 10.0
    return params


def brute_force_krum_scores(stacked: np.ndarray, f: int) -> np.ndarray:
    """Minimum over every neighbour subset of size tau - f - 2 of the summed squared distances."""
    tau = len(stacked)
    scores = np.zeros(tau)
    for i in range(tau):
        others = [j for j in range(tau) if j != i]
        scores[i] = min(
            sum(float(np.sum((stacked[i] - stacked[j]) ** 2)) for j in subset)
            for subset in combinations(others, tau - f - 2)
        )
    return scores


def brute_force_multi_krum(stacked: np.ndarray, f: int) -> list:
    """Repeatedly takes the brute-force Krum winner out of the remaining updates, tau - f - 2 times."""
    remaining = list(range(len(stacked)))
    selected = []
    while len(selected) < len(stacked) - f - 2:
        scores = brute_force_krum_scores(stacked[remaining], f)
        selected.append(remaining.pop(int(np.argmin(scores))))
    return selected


def prufer_to_edges(sequence, n: int):
    degree = [1] * n
    for node in sequence:
        degree[node] += 1
    edges = []
    for node in sequence:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, node))
        degree[leaf] -= 1
        degree[node] -= 1
    u, v = [i for i in range(n) if degree[i] == 1]
    edges.append((u, v))
    return edges


def brute_force_mst_weight(matrix: np.ndarray) -> float:
    """Minimum total weight over all n^(n-2) labelled spanning trees."""
    n = len(matrix)
    if n == 2:
        return float(matrix[0, 1])
    best = np.inf
    for index in range(n ** (n - 2)):
        sequence = [(index // n**k) % n for k in range(n - 2)]
        best = min(best, sum(matrix[a, b] for a, b in prufer_to_edges(sequence, n)))
    return float(best)


def random_symmetric(n: int, seed: int) -> np.ndarray:
    upper = np.triu(np.random.default_rng(seed).uniform(0.1, 10.0, size=(n, n)), 1)
    return upper + upper.T


def simplex_blob(size: int, dim: int, scale: float, offset=0.0, start: int = 0) -> np.ndarray:
    """`size` points that are pairwise exactly scale * sqrt(2) apart."""
    return scale * np.eye(dim)[start : start + size] + offset


def write_idx(path: Path, array: np.ndarray, magic: int, compress: bool = False) -> Path:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">i", magic) + b"".join(struct.pack(">i", d) for d in array.shape)
    payload = header + array.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)
    return path


def write_mnist_like(directory: Path, n: int = 20, seed: int = TEST_SEED, compress: bool = False):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    suffix = ".gz" if compress else ""
    write_idx(directory / f"images-idx3-ubyte{suffix}", images, IDX_IMAGES_MAGIC, compress)
    write_idx(directory / f"labels-idx1-ubyte{suffix}", labels, IDX_LABELS_MAGIC, compress)
    return directory / f"images-idx3-ubyte{suffix}", directory / f"labels-idx1-ubyte{suffix}", images, labels


def tiny_config(**overrides) -> ExperimentConfig:
    """A synthetic experiment that runs a round in well under a second."""
    config = ExperimentConfig(
        seed=TEST_SEED,
        num_clients=12,
        clients_per_round=6,
        malicious_fraction=0.0,
        global_iterations=2,
        batch_size=16,
        lr=0.05,
        data=DataConfig(source="synthetic", classes=3, n_per_class=40, dim=6, separation=6.0, test_fraction=0.25),
        network={"preset": "single-fc"},
        attack=AttackConfig(kind="none"),
        aggregator=AggregatorConfig(kind="fedavg"),
        output=OutputConfig(),
    )
    return replace(config, **overrides)


def identical_shards(num_clients: int, example: Dataset, copies: int) -> tuple:
    """Every client holds `copies` copies of the single example in `example`."""
    data = example.subset(np.zeros(copies, dtype=np.int64))
    return tuple(ClientShard(cid, data, data.empty()) for cid in range(num_clients))
