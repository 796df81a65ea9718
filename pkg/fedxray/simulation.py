from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from fedxray import constants
from fedxray.aggregation import AggregationResult, AggregatorConfig, aggregate, examine_all, make_probe
from fedxray.attacks import (
    AttackConfig,
    adaptive_craft,
    binary_search_lambda,
    craft_malicious_update,
    krum_oracle,
    make_xmam_oracle,
    train_local,
)
from fedxray.clustering import pairwise_distances, pca_project
from fedxray.data import (
    BackdoorTask,
    ClientShard,
    Dataset,
    add_feature_shifted_tail,
    dirichlet_partition,
    gen_synthetic,
    load_mnist,
    make_subpopulation_backdoor,
    make_trigger_task,
    mask_selector,
    poison_shard,
    tail_selector,
    train_test_split,
)
from fedxray.engine import LocalTraining, predict
from fedxray.loggers import setup_logger
from fedxray.network import PRESETS, NetworkSpec, ParamVector, init_params, single_fc
from fedxray.utils import time_function

logger = setup_logger(__name__)


class AggregationError(RuntimeError):
    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class DataConfig:
    source: str = "mnist"
    mnist_dir: str = str(constants.MNIST_DIR)
    dirichlet_alpha: float = constants.DIRICHLET_ALPHA
    max_train: int | None = None
    max_test: int | None = None
    classes: int = constants.SYNTHETIC_CLASSES
    n_per_class: int = constants.SYNTHETIC_PER_CLASS
    dim: int = constants.SYNTHETIC_DIM
    separation: float = constants.SYNTHETIC_SEPARATION
    test_fraction: float = constants.SYNTHETIC_TEST_FRACTION
    blank: int = 0

    def __post_init__(self):
        if self.source not in ("mnist", "synthetic"):
            raise ValueError(f"data.source must be 'mnist' or 'synthetic', got {self.source!r}")
        if self.dirichlet_alpha <= 0:
            raise ValueError(f"data.dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if self.blank < 0:
            raise ValueError(f"data.blank must be nonnegative, got {self.blank}")


@dataclass(frozen=True)
class OutputConfig:
    record_timing: bool = False
    record_slous: bool = True
    record_pca: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """Defaults reproduce the standard FL setting: N=200, tau=30, batch 32, lr 0.001 * 0.998^t."""

    seed: int = 0
    num_clients: int = constants.NUM_CLIENTS
    clients_per_round: int = constants.CLIENTS_PER_ROUND
    malicious_fraction: float = constants.MALICIOUS_FRACTION
    global_iterations: int = constants.GLOBAL_ITERATIONS
    local_iterations: int = constants.LOCAL_ITERATIONS
    batch_size: int = constants.BATCH_SIZE
    lr: float = constants.LEARNING_RATE
    lr_decay: float = constants.LEARNING_RATE_DECAY
    momentum: float = constants.MOMENTUM
    weight_decay: float = constants.WEIGHT_DECAY
    n_jobs: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    network: Dict[str, Any] = field(default_factory=lambda: {"preset": "lenet-lite"})
    attack: AttackConfig = field(default_factory=AttackConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if not 0 <= self.malicious_fraction < 0.5:
            raise ValueError(
                f"malicious_fraction={self.malicious_fraction} breaks the threat model: "
                "malicious clients must be fewer than 50% (0 <= malicious_fraction < 0.5)"
            )
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(
                f"clients_per_round={self.clients_per_round} must lie in [1, num_clients={self.num_clients}]"
            )
        if self.attack.kind == "none" and self.malicious_fraction > 0:
            raise ValueError("attack.kind is 'none' but malicious_fraction > 0; set malicious_fraction: 0")
        if self.attack.kind != "none" and self.malicious_per_round == 0:
            logger.warning(f"attack {self.attack.kind} configured but no malicious client is sampled per round")
        if self.global_iterations < 0 or self.local_iterations < 0 or self.batch_size < 1:
            raise ValueError("global_iterations, local_iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError(f"need lr > 0 and lr_decay in (0, 1], got {self.lr}, {self.lr_decay}")

    @property
    def malicious_per_round(self) -> int:
        return int(np.floor(self.clients_per_round * self.malicious_fraction + 0.5))

    def lr_at(self, t: int) -> float:
        return self.lr * self.lr_decay**t

    def local_training(self, t: int) -> LocalTraining:
        return LocalTraining(self.lr_at(t), self.local_iterations, self.batch_size, self.momentum, self.weight_decay)


@dataclass(frozen=True, eq=False)
class Experiment:
    config: ExperimentConfig
    spec: NetworkSpec
    train: Dataset
    test: Dataset
    task: BackdoorTask | None
    probe: np.ndarray


@dataclass(frozen=True, eq=False)
class SimState:
    params: ParamVector
    shards: Tuple[ClientShard, ...]
    malicious_ids: Tuple[int, ...]
    round_index: int = 0


@dataclass(frozen=True, eq=False)
class RoundReport:
    iteration: int
    test_error: float
    attack_success_rate: float | None
    preserved_ids: Tuple[int, ...]
    screening_seconds: float
    sampled_ids: Tuple[int, ...] = ()
    malicious_ids: Tuple[int, ...] = ()
    lr: float = 0.0
    adaptive_lambda: float | None = None
    adaptive_accepted: bool | None = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def preserved_malicious(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.preserved_ids) & set(self.malicious_ids)))


ReportSink = Callable[[RoundReport], None]


def network_spec(network: Dict[str, Any], input_shape, num_classes: int) -> NetworkSpec:
    if "preset" in network:
        name = network["preset"]
        if name not in PRESETS:
            raise ValueError(f"unknown network preset {name!r}, expected one of {sorted(PRESETS)}")
        return PRESETS[name](tuple(input_shape), num_classes)
    return NetworkSpec.from_dict({"input_shape": input_shape, "num_classes": num_classes, **network})


def _cap(data: Dataset, limit: int | None, seed: int) -> Dataset:
    if limit is None or limit >= len(data):
        return data
    return data.subset(np.sort(np.random.default_rng([seed, 2]).permutation(len(data))[:limit]))


def load_data(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    data_config = config.data
    if data_config.source == "mnist":
        train, test = load_mnist(data_config.mnist_dir)
    else:
        full = gen_synthetic(
            data_config.classes,
            data_config.n_per_class,
            data_config.dim,
            config.seed,
            data_config.separation,
            blank=data_config.blank,
        )
        train, test = train_test_split(full, data_config.test_fraction, config.seed)
    return _cap(train, data_config.max_train, config.seed), _cap(test, data_config.max_test, config.seed + 1)


def build_experiment(config: ExperimentConfig, data: Tuple[Dataset, Dataset] | None = None) -> Experiment:
    """data: (train, test) to use instead of loading from config.data."""
    train, test = data if data is not None else load_data(config)
    attack = config.attack
    task = None
    if attack.kind == "trigger":
        task = make_trigger_task(test, attack.target_label, attack.block_size, attack.corner, attack.trigger_value)
    elif attack.kind == "subpopulation":
        if config.data.source == "synthetic":
            train, mask = add_feature_shifted_tail(
                train, attack.source_label, 1.0 - attack.tail_quantile, attack.tail_shift, config.seed
            )
            selector = mask_selector(mask)
        else:
            selector = tail_selector(attack.source_label, attack.tail_quantile)
            mask = selector(train)
        task = make_subpopulation_backdoor(train, selector, attack.target_label, seed=config.seed)
        # the rare subpopulation is only seen by the attackers
        train = train.subset(np.flatnonzero(~mask))

    spec = network_spec(config.network, train.input_shape, train.num_classes)
    aggregator = config.aggregator
    if aggregator.f is None and aggregator.kind in ("krum", "multi-krum"):
        f = min(config.malicious_per_round, max(config.clients_per_round - 3, 0))
        aggregator = replace(aggregator, f=f)
    if aggregator.n_jobs != config.n_jobs:
        aggregator = replace(aggregator, n_jobs=config.n_jobs)
    config = replace(config, aggregator=aggregator)
    probe = make_probe(spec, aggregator.probe, aggregator.probe_seed)
    logger.info(f"{spec.name}: zeta={spec.num_params}, train={len(train)}, test={len(test)}")
    return Experiment(config, spec, train, test, task, probe)


def build_state(experiment: Experiment) -> SimState:
    config = experiment.config
    shards = dirichlet_partition(experiment.train, config.num_clients, config.data.dirichlet_alpha, config.seed)
    pool_size = 0
    if config.malicious_fraction > 0:
        pool_size = max(config.malicious_per_round, int(round(config.num_clients * config.malicious_fraction)))
    rng = np.random.default_rng([config.seed, 1])
    malicious_ids = tuple(sorted(int(c) for c in rng.choice(config.num_clients, size=pool_size, replace=False)))
    for cid in malicious_ids:
        shard = shards[cid]
        if experiment.task is not None:
            shards[cid] = poison_shard(shard, experiment.task, config.attack.poison_fraction, [config.seed, 3, cid])
        else:
            shards[cid] = ClientShard(cid, shard.clean, shard.poisoned, is_malicious=True)
    params = init_params(experiment.spec, config.seed)
    return SimState(params, tuple(shards), malicious_ids, 0)


def sample_clients(state: SimState, config: ExperimentConfig, t: int) -> Tuple[List[int], List[int]]:
    """Exactly malicious_per_round attackers and the rest benign, uniformly without replacement."""
    rng = np.random.default_rng([config.seed, t])
    malicious_pool = np.array(state.malicious_ids, dtype=np.int64)
    benign_pool = np.setdiff1d(np.arange(config.num_clients), malicious_pool)
    m = config.malicious_per_round if len(malicious_pool) else 0
    malicious = sorted(int(c) for c in rng.choice(malicious_pool, size=m, replace=False)) if m else []
    benign = [int(c) for c in rng.choice(benign_pool, size=config.clients_per_round - m, replace=False)]
    return sorted(malicious + benign), malicious


def attack_success_rate(params: ParamVector, spec: NetworkSpec, task: BackdoorTask) -> float:
    if len(task.test_set) == 0:
        raise ValueError("backdoor test set is empty")
    return float(np.mean(predict(params, spec, task.test_set.inputs) == task.target_label))


def testing_error_rate(params: ParamVector, spec: NetworkSpec, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("test set is empty")
    return float(1.0 - np.mean(predict(params, spec, test.inputs) == test.labels))


def separation_ratio(points: np.ndarray, malicious_mask: Sequence[bool]) -> float:
    """Closest benign-malicious distance over the largest benign-benign distance."""
    mask = np.asarray(malicious_mask, dtype=bool)
    if mask.all() or not mask.any() or (~mask).sum() < 2:
        raise ValueError("need at least two benign points and one malicious point")
    distances = pairwise_distances(np.asarray(points, dtype=np.float64))
    spread = distances[np.ix_(~mask, ~mask)].max()
    gap = distances[np.ix_(~mask, mask)].min()
    return float(gap / spread) if spread > 0 else float("inf")


def _client_update(state: SimState, experiment: Experiment, t: int, cid: int) -> ParamVector:
    config = experiment.config
    shard = state.shards[cid]
    seed = np.random.SeedSequence([config.seed, t, cid])
    hyper = config.local_training(t)
    if shard.is_malicious and config.attack.is_backdoor:
        return craft_malicious_update(state.params, shard, experiment.spec, config.attack, hyper, seed)
    return train_local(state.params, shard, experiment.spec, hyper, seed)


def _adaptive_attack(
    experiment: Experiment, updates: List[ParamVector], flags: List[bool], global_params: ParamVector
):
    """Replaces every malicious update by u_g - lam * sign(u_g) with lam from the binary search."""
    config = experiment.config
    f = sum(flags)
    benign = [u for u, is_malicious in zip(updates, flags) if not is_malicious]
    u_g = np.mean(np.vstack(updates), axis=0)
    if config.attack.kind == "krum-attack":
        oracle = krum_oracle
    else:
        xmam_config = replace(config.aggregator, kind="xmam")
        oracle = make_xmam_oracle(experiment.spec, experiment.probe, xmam_config, global_params)
    search = binary_search_lambda(
        oracle, benign, f, config.attack.lambda_init, config.attack.lambda_floor, global_update_est=u_g
    )
    crafted = adaptive_craft(u_g, search.lam)
    return [crafted if is_malicious else u for u, is_malicious in zip(updates, flags)], search


def _round_diagnostics(
    experiment: Experiment,
    stacked: np.ndarray,
    result: AggregationResult,
) -> Dict[str, Any]:
    output = experiment.config.output
    diagnostics: Dict[str, Any] = {}
    for key in ("cluster_labels", "copies", "krum_scores", "all_noise", "rfa_rounds", "beta_r"):
        if key in result.diagnostics:
            diagnostics[key] = result.diagnostics[key]
    slous = result.diagnostics.get("slous")
    if slous is None and (output.record_slous or output.record_pca):
        slous = examine_all(stacked, experiment.spec, experiment.probe)
    if output.record_slous:
        diagnostics["slous"] = slous
    if output.record_pca and len(stacked) >= 2:
        diagnostics["pca_updates"] = pca_project(stacked, k=2).coords
        diagnostics["pca_slous"] = pca_project(slous, k=min(2, slous.shape[1])).coords
    return diagnostics


def run_round(state: SimState, experiment: Experiment) -> Tuple[SimState, RoundReport]:
    """One FL iteration: sample, train locally, aggregate, then w <- w + eta_g * u."""
    config = experiment.config
    t = state.round_index
    sampled, malicious = sample_clients(state, config, t)

    if config.n_jobs == 1:
        updates = [_client_update(state, experiment, t, cid) for cid in sampled]
    else:
        updates = Parallel(n_jobs=config.n_jobs, prefer="threads")(
            delayed(_client_update)(state, experiment, t, cid) for cid in sampled
        )

    search = None
    flags = [cid in malicious for cid in sampled]
    if config.attack.is_adaptive and any(flags):
        updates, search = _adaptive_attack(experiment, updates, flags, state.params)

    stacked = np.vstack(updates)
    try:
        result = aggregate(
            stacked,
            config.aggregator,
            ids=sampled,
            round_index=t,
            weights=[len(state.shards[cid]) for cid in sampled],
            spec=experiment.spec,
            probe=experiment.probe,
            global_params=state.params,
        )
    except Exception as e:
        raise AggregationError(f"round {t}: {config.aggregator.kind} failed: {e}") from e

    params = state.params + config.aggregator.eta_g * result.global_update
    test_error = testing_error_rate(params, experiment.spec, experiment.test)
    asr = attack_success_rate(params, experiment.spec, experiment.task) if experiment.task is not None else None
    report = RoundReport(
        iteration=t,
        test_error=test_error,
        attack_success_rate=asr,
        preserved_ids=tuple(sorted(result.preserved_ids)),
        screening_seconds=result.screening_seconds,
        sampled_ids=tuple(sampled),
        malicious_ids=tuple(malicious),
        lr=config.lr_at(t),
        adaptive_lambda=None if search is None else search.lam,
        adaptive_accepted=None if search is None else search.accepted,
        diagnostics=_round_diagnostics(experiment, stacked, result),
    )
    logger.info(
        f"round {t}: test_error={test_error:.4f} asr={asr} "
        f"preserved={len(report.preserved_ids)}/{len(sampled)} malicious_kept={len(report.preserved_malicious)}"
    )
    return replace(state, params=params, round_index=t + 1), report


def run_experiment(
    config: ExperimentConfig | Experiment,
    sinks: Iterable[ReportSink] = (),
) -> Tuple[List[RoundReport], ParamVector]:
    """T sequential rounds; every report is handed to each sink as soon as its round ends."""
    experiment = config if isinstance(config, Experiment) else build_experiment(config)
    sinks = list(sinks)
    state = build_state(experiment)
    reports = []
    for _ in range(experiment.config.global_iterations):
        state, report = run_round(state, experiment)
        reports.append(report)
        for sink in sinks:
            sink(report)
    return reports, state.params


@time_function
def screening_benchmark(
    aggregators: Sequence[str],
    tau: int,
    zeta: int,
    M: int,
    repeats: int = 3,
    seed: int = 0,
    f: int | None = None,
) -> pd.DataFrame:
    """
    Times the screening phase of each aggregator on random updates of length zeta.
    XMAM runs on a single fully connected layer with the largest parameter count <= zeta.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be at least 3, got {repeats}")
    if zeta < 2 * M:
        raise ValueError(f"zeta={zeta} is too small for {M} classes")
    rng = np.random.default_rng(seed)
    updates = rng.normal(scale=1e-2, size=(tau, zeta))
    spec = single_fc((zeta - M) // M, M)
    if f is None:
        f = min(int(round(tau * constants.MALICIOUS_FRACTION)), max(tau - 3, 0))
    rows = []
    for kind in aggregators:
        config = AggregatorConfig(kind=kind, f=f)
        batch = updates[:, : spec.num_params] if kind == "xmam" else updates
        times = [aggregate(batch, config, spec=spec).screening_seconds for _ in range(repeats)]
        rows.append(
            {
                "method": kind,
                "complexity": constants.SCREENING_COMPLEXITY[kind],
                "zeta": batch.shape[1],
                "mean_seconds": float(np.mean(times)),
                "std_seconds": float(np.std(times)),
            }
        )
        logger.info(f"{kind}: {rows[-1]['mean_seconds']:.6f}s over {repeats} repeats")
    return pd.DataFrame(rows, columns=["method", "complexity", "zeta", "mean_seconds", "std_seconds"])
