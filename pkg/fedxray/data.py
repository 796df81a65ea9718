from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Tuple
import gzip

import numpy as np

from fedxray.constants import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    MNIST_FILES,
    SYNTHETIC_SEPARATION,
    TRIGGER_CORNERS,
)
from fedxray.loggers import setup_logger

logger = setup_logger(__name__)


class DataFormatError(ValueError):
    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    inputs: (n, C, H, W) array
    labels: (n,) int64 array, every label in [0, num_classes)
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.inputs.ndim != 4:
            raise ValueError(f"{self.name}: inputs must be (n, C, H, W), got {self.inputs.shape}")
        if len(self.inputs) != len(labels):
            raise ValueError(f"{self.name}: {len(self.inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"{self.name}: labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, name or self.name)

    def relabel(self, label: int) -> "Dataset":
        return replace(self, labels=np.full(len(self), label, dtype=np.int64))

    def concat(self, other: "Dataset") -> "Dataset":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Dataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            self.num_classes,
            self.name,
        )

    def empty(self) -> "Dataset":
        return self.subset(np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    clean: Dataset
    poisoned: Dataset
    is_malicious: bool = False

    def __post_init__(self):
        if len(self.poisoned) > 0 and not self.is_malicious:
            raise ValueError(f"client {self.client_id} holds poisoned data but is not malicious")

    def __len__(self) -> int:
        return len(self.clean) + len(self.poisoned)

    def training_set(self) -> Dataset:
        return self.clean.concat(self.poisoned)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    block_size: int = 3
    corner: str = "bottom-right"
    value: float = 1.0


@dataclass(frozen=True, eq=False)
class BackdoorTask:
    """
    kind: "trigger" or "subpopulation"
    test_set: inputs carrying the backdoor feature, labels are the TRUE labels
    train_poison: subpopulation examples relabeled to target_label (subpopulation only)
    """

    kind: str
    target_label: int
    test_set: Dataset
    trigger: TriggerSpec | None = None
    train_poison: Dataset | None = None

    def __post_init__(self):
        if not 0 <= self.target_label < self.test_set.num_classes:
            raise ValueError(f"target_label {self.target_label} outside [0, {self.test_set.num_classes})")


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _header(raw: bytes, words: int, path) -> np.ndarray:
    if len(raw) < 4 * words:
        raise OSError(f"{path}: truncated IDX header")
    return np.frombuffer(raw, dtype=">i4", count=words).astype(np.int64)


def load_idx(images_path, labels_path, name: str = "mnist", num_classes: int = 10) -> Dataset:
    """
    MNIST IDX files (optionally gzipped). Pixels are scaled to [0, 1] and stored as float32.
    """
    image_raw = _read_bytes(images_path)
    label_raw = _read_bytes(labels_path)

    magic = _header(image_raw, 1, images_path)[0]
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    _, count, rows, cols = _header(image_raw, 4, images_path)
    magic = _header(label_raw, 1, labels_path)[0]
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    _, label_count = _header(label_raw, 2, labels_path)
    if label_count != count:
        raise DataFormatError(f"{count} images but {label_count} labels")

    if len(image_raw) < 16 + count * rows * cols:
        raise OSError(f"{images_path}: truncated, header promises {count} images of {rows}x{cols}")
    if len(label_raw) < 8 + count:
        raise OSError(f"{labels_path}: truncated, header promises {count} labels")

    pixels = np.frombuffer(image_raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    inputs = (pixels.reshape(count, 1, rows, cols) / np.float32(255.0)).astype(np.float32)
    labels = np.frombuffer(label_raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    logger.debug(f"loaded {count} examples of {rows}x{cols} from {images_path}")
    return Dataset(inputs, labels, num_classes, name)


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory) -> Tuple[Dataset, Dataset]:
    directory = Path(directory)
    train = load_idx(_find(directory, MNIST_FILES["train_images"]), _find(directory, MNIST_FILES["train_labels"]))
    test = load_idx(_find(directory, MNIST_FILES["test_images"]), _find(directory, MNIST_FILES["test_labels"]))
    return train, replace(test, name="mnist-test")


def mnist_available(directory) -> bool:
    try:
        for stem in MNIST_FILES.values():
            _find(Path(directory), stem)
    except FileNotFoundError:
        return False
    return True


def gen_synthetic(
    M: int,
    n_per_class: int,
    dim: int,
    seed: int,
    separation: float = SYNTHETIC_SEPARATION,
    sigma: float = 1.0,
    blank: int = 0,
) -> Dataset:
    """
    Gaussian blobs, one mean per class, unit-variance noise scaled by sigma.
    The class means are rescaled so the closest pair lies `separation` * sigma apart.
    `blank` trailing features are always 0, like the empty margin of an MNIST digit.
    Inputs are shaped (n, 1, 1, dim + blank).
    """
    if M < 2:
        raise ValueError(f"need at least 2 classes, got {M}")
    if n_per_class < 0 or dim < 1 or blank < 0:
        raise ValueError(f"invalid n_per_class={n_per_class}, dim={dim} or blank={blank}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(M, dim))
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    closest = gaps[~np.eye(M, dtype=bool)].min()
    means *= separation * sigma / closest
    labels = np.repeat(np.arange(M), n_per_class)
    points = means[labels] + sigma * rng.normal(size=(len(labels), dim))
    points = np.hstack([points, np.zeros((len(labels), blank))])
    return Dataset(points.reshape(len(labels), 1, 1, dim + blank), labels, M, "synthetic")


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(len(data) * test_fraction))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]), f"{data.name}-test")


def dirichlet_partition(data: Dataset, N: int, alpha: float, seed: int) -> List[ClientShard]:
    """
    Label-skewed split: for every class, one Dir(alpha) draw over the N clients decides
    how that class's examples are divided. A client left empty receives one example
    from the currently largest shard.
    """
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    if N > len(data):
        raise ValueError(f"cannot split {len(data)} examples over {N} clients")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    assignments: List[List[int]] = [[] for _ in range(N)]
    for label in range(data.num_classes):
        indices = np.flatnonzero(data.labels == label)
        rng.shuffle(indices)
        proportions = rng.dirichlet(np.full(N, alpha))
        cuts = (np.cumsum(proportions) * len(indices)).astype(int)[:-1]
        for client, part in enumerate(np.split(indices, cuts)):
            assignments[client].extend(part.tolist())

    for client in range(N):
        if not assignments[client]:
            donor = max(range(N), key=lambda c: len(assignments[c]))
            assignments[client].append(assignments[donor].pop())
            logger.warning(f"client {client} drew no data; moved one example from client {donor}")

    empty = data.empty()
    return [ClientShard(client, data.subset(np.sort(indices)), empty) for client, indices in enumerate(assignments)]


def stamp_trigger(inputs: np.ndarray, block_size: int, corner: str, value: float = 1.0) -> np.ndarray:
    """Copy of `inputs` with a block_size x block_size square set to `value` (1.0 is max intensity) in the corner."""
    _, _, h, w = inputs.shape
    if block_size < 1 or block_size > h or block_size > w:
        raise ValueError(f"trigger block {block_size} does not fit a {h}x{w} image")
    if corner not in TRIGGER_CORNERS:
        raise ValueError(f"unknown corner {corner!r}, expected one of {TRIGGER_CORNERS}")
    rows = slice(h - block_size, h) if corner.startswith("bottom") else slice(0, block_size)
    cols = slice(w - block_size, w) if corner.endswith("right") else slice(0, block_size)
    stamped = np.array(inputs, copy=True)
    stamped[:, :, rows, cols] = value
    return stamped


def choose_poison_indices(n: int, fraction: float, seed) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError(f"poison fraction must lie in (0, 1], got {fraction}")
    count = int(np.floor(n * fraction + 0.5))
    return np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))


def apply_trigger(
    data: Dataset,
    block_size: int,
    corner: str,
    target_label: int,
    fraction: float,
    seed=0,
    value: float = 1.0,
) -> Dataset:
    """The poisoned copies of a `fraction` share of `data`: stamped and relabeled to target_label."""
    if not 0 <= target_label < data.num_classes:
        raise ValueError(f"target_label {target_label} outside [0, {data.num_classes})")
    selected = data.subset(choose_poison_indices(len(data), fraction, seed))
    return Dataset(
        stamp_trigger(selected.inputs, block_size, corner, value),
        np.full(len(selected), target_label, dtype=np.int64),
        data.num_classes,
        f"{data.name}-trigger",
    )


def make_trigger_task(
    test_data: Dataset, target_label: int, block_size: int = 3, corner: str = "bottom-right", value: float = 1.0
):
    """Backdoor test set: every test example whose true label differs from the target, stamped."""
    keep = np.flatnonzero(test_data.labels != target_label)
    if len(keep) == 0:
        raise ValueError("no test examples outside the target class")
    source = test_data.subset(keep)
    test_set = Dataset(
        stamp_trigger(source.inputs, block_size, corner, value), source.labels, test_data.num_classes, "trigger-test"
    )
    return BackdoorTask("trigger", target_label, test_set, trigger=TriggerSpec(block_size, corner, value))


Selector = Callable[[Dataset], np.ndarray]


def class_selector(label: int) -> Selector:
    return lambda data: data.labels == label


def tail_selector(label: int, quantile: float) -> Selector:
    """Examples of `label` whose distance to their class mean is at or above the given quantile."""

    def select(data: Dataset) -> np.ndarray:
        mask = np.zeros(len(data), dtype=bool)
        members = np.flatnonzero(data.labels == label)
        if len(members) == 0:
            return mask
        flat = data.inputs[members].reshape(len(members), -1)
        distances = np.linalg.norm(flat - flat.mean(axis=0), axis=1)
        mask[members[distances >= np.quantile(distances, quantile)]] = True
        return mask

    return select


def mask_selector(mask: np.ndarray) -> Selector:
    mask = np.asarray(mask, dtype=bool)
    return lambda data: mask


def add_feature_shifted_tail(
    data: Dataset, source_label: int, fraction: float, shift: float, seed: int
) -> Tuple[Dataset, np.ndarray]:
    """
    Moves a `fraction` share of the `source_label` examples by `shift` along one random unit
    direction, creating a rare subpopulation. Returns the new dataset and the mask of moved examples.
    """
    rng = np.random.default_rng(seed)
    members = np.flatnonzero(data.labels == source_label)
    if len(members) == 0:
        raise ValueError(f"no examples with label {source_label}")
    count = max(1, int(round(len(members) * fraction)))
    chosen = np.sort(rng.choice(members, size=count, replace=False))
    direction = rng.normal(size=data.inputs.shape[1:])
    direction /= np.linalg.norm(direction)
    inputs = np.array(data.inputs, copy=True)
    inputs[chosen] += shift * direction
    mask = np.zeros(len(data), dtype=bool)
    mask[chosen] = True
    return replace(data, inputs=inputs), mask


def make_subpopulation_backdoor(
    data: Dataset,
    selector: Selector,
    target_label: int,
    test_fraction: float = 0.5,
    seed: int = 0,
) -> BackdoorTask:
    """
    Relabel a naturally occurring group of examples. The selected examples are split into a
    train-side poison (relabeled to target_label) and a disjoint test slice (true labels kept).
    """
    if not 0 <= target_label < data.num_classes:
        raise ValueError(f"target_label {target_label} outside [0, {data.num_classes})")
    selected = np.flatnonzero(selector(data))
    if len(selected) == 0:
        raise ValueError("selector picked no examples")
    if np.any(data.labels[selected] == target_label):
        raise ValueError(f"subpopulation already carries target_label {target_label}; the backdoor would be a no-op")
    if len(selected) < 2:
        raise ValueError("subpopulation needs at least 2 examples to split into train and test sides")
    order = np.random.default_rng(seed).permutation(selected)
    n_test = min(len(order) - 1, max(1, int(round(len(order) * test_fraction))))
    test_set = data.subset(np.sort(order[:n_test]), "subpopulation-test")
    train_poison = data.subset(np.sort(order[n_test:]), "subpopulation-train").relabel(target_label)
    return BackdoorTask("subpopulation", target_label, test_set, train_poison=train_poison)


def poison_shard(shard: ClientShard, task: BackdoorTask, fraction: float, seed) -> ClientShard:
    """
    Marks the client malicious and swaps a `fraction` share of its clean data for poison,
    keeping the local data size unchanged.
    """
    clean = shard.training_set()
    chosen = choose_poison_indices(len(clean), fraction, seed)
    rest = np.setdiff1d(np.arange(len(clean)), chosen)
    if task.kind == "trigger":
        poisoned = apply_trigger(
            clean.subset(chosen),
            task.trigger.block_size,
            task.trigger.corner,
            task.target_label,
            1.0,
            seed,
            task.trigger.value,
        )
    elif task.kind == "subpopulation":
        pool = task.train_poison
        picks = np.random.default_rng(seed).choice(len(pool), size=len(chosen), replace=len(chosen) > len(pool))
        poisoned = pool.subset(np.sort(picks))
    else:
        raise ValueError(f"unknown backdoor kind {task.kind!r}")
    return ClientShard(shard.client_id, clean.subset(rest), poisoned, is_malicious=True)
