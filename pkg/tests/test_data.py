import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from fedxray.constants import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from fedxray.data import (
    ClientShard,
    DataFormatError,
    Dataset,
    add_feature_shifted_tail,
    apply_trigger,
    class_selector,
    dirichlet_partition,
    gen_synthetic,
    load_idx,
    make_subpopulation_backdoor,
    make_trigger_task,
    mask_selector,
    poison_shard,
    stamp_trigger,
    tail_selector,
    train_test_split,
)
from helpers import TEST_SEED, example_ids, indexed_dataset, write_idx, write_mnist_like


@pytest.mark.parametrize("compress", [False, True])
def test_load_idx_scales_pixels(tmp_path, compress):
    images_path, labels_path, images, labels = write_mnist_like(tmp_path, n=12, compress=compress)
    data = load_idx(images_path, labels_path)
    assert len(data) == 12 and data.num_classes == 10
    assert data.inputs.shape == (12, 1, 28, 28)
    assert data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0
    assert np.allclose(data.inputs[:, 0] * 255, images, atol=1e-3)
    assert np.array_equal(data.labels, labels)


def test_all_zero_image_loads_as_zeros(tmp_path):
    write_idx(tmp_path / "img", np.zeros((1, 28, 28)), IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "lab", np.array([7]), IDX_LABELS_MAGIC)
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert np.array_equal(data.inputs, np.zeros((1, 1, 28, 28)))


def test_wrong_magic_is_a_format_error(tmp_path):
    write_idx(tmp_path / "img", np.zeros((2, 28, 28)), IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "lab", np.zeros((2, 1, 1)), 0x00000803)
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_count_mismatch_is_a_format_error(tmp_path):
    write_idx(tmp_path / "img", np.zeros((3, 28, 28)), IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "lab", np.zeros(2), IDX_LABELS_MAGIC)
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_truncated_file_is_an_io_error(tmp_path):
    images_path, labels_path, _, _ = write_mnist_like(tmp_path, n=5)
    raw = images_path.read_bytes()
    images_path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(OSError):
        load_idx(images_path, labels_path)


def test_gen_synthetic_is_deterministic():
    first, second = gen_synthetic(2, 10, 4, seed=1), gen_synthetic(2, 10, 4, seed=1)
    assert np.array_equal(first.inputs, second.inputs)
    assert np.array_equal(first.labels, second.labels)
    assert first.inputs.shape == (20, 1, 1, 4)


def test_gen_synthetic_edge_cases():
    assert len(gen_synthetic(3, 0, 4, seed=0)) == 0
    with pytest.raises(ValueError):
        gen_synthetic(1, 10, 4, seed=0)


def test_gen_synthetic_is_linearly_separable():
    data = gen_synthetic(3, 600, 10, seed=TEST_SEED, separation=6.0)
    train, test = train_test_split(data, 0.3, seed=TEST_SEED)
    model = LogisticRegression(max_iter=1000).fit(train.inputs.reshape(len(train), -1), train.labels)
    accuracy = model.score(test.inputs.reshape(len(test), -1), test.labels)
    assert accuracy > 0.98, accuracy


def test_train_test_split_is_a_partition():
    data = indexed_dataset(50, 3)
    train, test = train_test_split(data, 0.2, seed=0)
    assert len(test) == 10
    ids = np.concatenate([example_ids(train), example_ids(test)])
    assert sorted(ids) == list(range(50))


def test_dirichlet_single_client_gets_everything():
    data = indexed_dataset(30, 3)
    (shard,) = dirichlet_partition(data, 1, 0.5, seed=0)
    assert sorted(example_ids(shard.clean)) == list(range(30))
    assert not shard.is_malicious and len(shard.poisoned) == 0


@pytest.mark.parametrize("N,alpha,seed", [(5, 0.5, 0), (20, 0.1, 1), (40, 0.5, 2), (7, 100.0, 3)])
def test_dirichlet_partition_is_disjoint_and_exhaustive(N, alpha, seed):
    data = indexed_dataset(200, 10, seed)
    shards = dirichlet_partition(data, N, alpha, seed)
    ids = np.concatenate([example_ids(s.clean) for s in shards])
    assert len(ids) == len(set(ids)) == 200
    assert all(len(s) > 0 for s in shards), "every client must hold data"
    assert [s.client_id for s in shards] == list(range(N))


def test_extreme_skew_repairs_empty_clients():
    data = indexed_dataset(12, 2)
    shards = dirichlet_partition(data, 12, 0.01, seed=TEST_SEED)
    assert all(len(s) == 1 for s in shards)


def test_large_alpha_is_close_to_uniform():
    data = gen_synthetic(10, 1000, 2, seed=0)
    shards = dirichlet_partition(data, 10, 1000.0, seed=TEST_SEED)
    for shard in shards:
        histogram = np.bincount(shard.clean.labels, minlength=10)
        assert np.all(np.abs(histogram - 100) <= 20), histogram


def test_dirichlet_argument_errors():
    data = indexed_dataset(5, 2)
    with pytest.raises(ValueError):
        dirichlet_partition(data, 6, 0.5, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(data, 2, 0.0, seed=0)


def test_apply_trigger_poisons_thirty_percent():
    data = Dataset(np.random.default_rng(0).uniform(0, 0.5, size=(100, 1, 8, 8)), np.arange(100) % 10, 10)
    before = data.inputs.copy()
    poisoned = apply_trigger(data, 3, "bottom-right", 0, 0.3, seed=TEST_SEED)
    assert len(poisoned) == 30
    assert np.all(poisoned.labels == 0)
    assert np.all(poisoned.inputs[:, :, 5:, 5:] == 1.0)
    assert np.all(poisoned.inputs[:, :, :5, :] < 1.0) and np.all(poisoned.inputs[:, :, :, :5] < 1.0)
    assert np.array_equal(data.inputs, before), "the source dataset must not change"


@pytest.mark.parametrize("corner,rows,cols", [("top-left", 0, 0), ("top-right", 0, 6), ("bottom-left", 6, 0)])
def test_stamp_trigger_corners(corner, rows, cols):
    stamped = stamp_trigger(np.zeros((1, 1, 8, 8)), 2, corner)
    assert stamped[0, 0, rows : rows + 2, cols : cols + 2].sum() == 4.0
    assert stamped.sum() == 4.0


def test_trigger_block_must_fit():
    data = Dataset(np.zeros((4, 1, 4, 4)), np.zeros(4), 2)
    with pytest.raises(ValueError):
        apply_trigger(data, 0, "bottom-right", 1, 0.5)
    with pytest.raises(ValueError):
        apply_trigger(data, 5, "bottom-right", 1, 0.5)
    with pytest.raises(ValueError):
        apply_trigger(data, 2, "middle", 1, 0.5)


def test_trigger_task_holds_stamped_non_target_examples():
    data = Dataset(np.zeros((20, 1, 6, 6)), np.arange(20) % 4, 4)
    task = make_trigger_task(data, target_label=2, block_size=3)
    assert len(task.test_set) == 15
    assert np.all(task.test_set.labels != 2)
    assert np.all(task.test_set.inputs[:, :, 3:, 3:] == 1.0)


def test_blank_features_stay_zero():
    plain = gen_synthetic(3, 50, 4, seed=TEST_SEED)
    padded = gen_synthetic(3, 50, 4, seed=TEST_SEED, blank=2)
    assert padded.input_shape == (1, 1, 6)
    assert np.array_equal(padded.inputs[..., :4], plain.inputs)
    assert np.all(padded.inputs[..., 4:] == 0.0)
    with pytest.raises(ValueError):
        gen_synthetic(3, 50, 4, seed=0, blank=-1)


def test_trigger_value_reaches_test_set_and_poison():
    data = Dataset(np.zeros((30, 1, 1, 5)), np.arange(30) % 3, 3)
    task = make_trigger_task(data, target_label=0, block_size=1, value=10.0)
    assert task.trigger.value == 10.0
    assert np.all(task.test_set.inputs[..., -1] == 10.0) and np.all(task.test_set.inputs[..., :-1] == 0.0)
    poisoned = poison_shard(ClientShard(0, data, data.empty()), task, 0.5, seed=TEST_SEED)
    assert np.all(poisoned.poisoned.inputs[..., -1] == 10.0)
    assert np.all(poisoned.clean.inputs == 0.0)


def test_subpopulation_backdoor_from_shifted_tail():
    data = gen_synthetic(3, 200, 6, seed=TEST_SEED)
    shifted, mask = add_feature_shifted_tail(data, source_label=1, fraction=0.05, shift=3.0, seed=TEST_SEED)
    assert mask.sum() == 10 and np.all(shifted.labels[mask] == 1)
    task = make_subpopulation_backdoor(shifted, mask_selector(mask), target_label=0, seed=TEST_SEED)
    assert task.kind == "subpopulation" and len(task.test_set) > 0
    assert np.all(task.train_poison.labels == 0)
    assert np.all(task.test_set.labels == 1), "the test side keeps the true labels"
    train_rows = {tuple(x) for x in task.train_poison.inputs.reshape(len(task.train_poison), -1)}
    test_rows = {tuple(x) for x in task.test_set.inputs.reshape(len(task.test_set), -1)}
    assert not train_rows & test_rows
    assert len(train_rows) + len(test_rows) == 10


def test_subpopulation_argument_errors():
    data = gen_synthetic(3, 20, 4, seed=0)
    with pytest.raises(ValueError):
        make_subpopulation_backdoor(data, class_selector(1), target_label=1)
    with pytest.raises(ValueError):
        make_subpopulation_backdoor(data, mask_selector(np.zeros(len(data), dtype=bool)), target_label=0)


def test_tail_selector_picks_the_far_examples():
    data = gen_synthetic(2, 100, 4, seed=TEST_SEED)
    mask = tail_selector(1, 0.9)(data)
    assert 9 <= mask.sum() <= 11
    assert np.all(data.labels[mask] == 1)


def test_poison_shard_keeps_size_and_marks_malicious():
    data = Dataset(np.random.default_rng(0).uniform(0, 0.5, size=(40, 1, 6, 6)), np.arange(40) % 4, 5)
    shard = ClientShard(3, data, data.empty())
    task = make_trigger_task(data, target_label=4, block_size=2)
    poisoned = poison_shard(shard, task, 0.3, seed=TEST_SEED)
    assert poisoned.is_malicious and poisoned.client_id == 3
    assert len(poisoned.poisoned) == 12 and len(poisoned) == 40
    assert np.all(poisoned.poisoned.labels == 4)
    assert len(shard.poisoned) == 0, "the source shard must not change"


def test_shard_with_poison_must_be_malicious():
    data = Dataset(np.zeros((2, 1, 2, 2)), np.zeros(2), 2)
    with pytest.raises(ValueError):
        ClientShard(0, data, data, is_malicious=False)
