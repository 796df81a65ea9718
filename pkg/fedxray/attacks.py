from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Sequence

import numpy as np

from fedxray import constants
from fedxray.aggregation import AggregatorConfig, krum_scores, squared_distances, xmam_aggregate
from fedxray.data import ClientShard
from fedxray.engine import LocalTraining, fit, loss_and_grad
from fedxray.loggers import setup_logger
from fedxray.network import NetworkSpec, ParamVector, Tensor

logger = setup_logger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    """
    kind: none, trigger, subpopulation (backdoors) or krum-attack, xmam-attack (adaptive)
    mode: blackbox, pgd or smp, how a backdoor update is hidden
    epsilon: PGD norm bound
    rho1, rho2: SMP weights of the poison loss and of the distance to the global model
    replace_scale: multiply the malicious update by this factor (model replacement)
    block_size, corner, trigger_value: the square stamped on trigger inputs and the value written into it
    """

    kind: str = "trigger"
    mode: str = "blackbox"
    epsilon: float = constants.PGD_EPSILON
    rho1: float = constants.SMP_RHO1
    rho2: float = constants.SMP_RHO2
    replace_scale: float | None = None
    poison_fraction: float = constants.POISON_FRACTION
    target_label: int = constants.TARGET_LABEL
    block_size: int = constants.TRIGGER_BLOCK_SIZE
    corner: str = constants.TRIGGER_CORNER
    trigger_value: float = constants.TRIGGER_VALUE
    source_label: int = 1
    tail_quantile: float = constants.TAIL_QUANTILE
    tail_shift: float = constants.TAIL_SHIFT
    lambda_init: float = constants.LAMBDA_INIT
    lambda_floor: float = constants.LAMBDA_FLOOR

    def __post_init__(self):
        if self.kind not in constants.ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}, expected one of {constants.ATTACK_KINDS}")
        if self.mode not in constants.ATTACK_MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}, expected one of {constants.ATTACK_MODES}")
        if self.mode == "pgd" and self.epsilon <= 0:
            raise ValueError(f"PGD needs epsilon > 0, got {self.epsilon}")
        if self.mode == "smp" and (self.rho1 < 0 or self.rho2 < 0):
            raise ValueError(f"SMP needs rho1, rho2 >= 0, got {self.rho1}, {self.rho2}")
        if self.replace_scale is not None and self.replace_scale < 1:
            raise ValueError(f"replace_scale must be at least 1, got {self.replace_scale}")
        if not 0 < self.poison_fraction <= 1:
            raise ValueError(f"poison_fraction must lie in (0, 1], got {self.poison_fraction}")
        if self.lambda_init <= 0 or self.lambda_floor <= 0:
            raise ValueError("lambda_init and lambda_floor must be positive")

    @property
    def is_backdoor(self) -> bool:
        return self.kind in ("trigger", "subpopulation")

    @property
    def is_adaptive(self) -> bool:
        return self.kind in ("krum-attack", "xmam-attack")


@dataclass(frozen=True, eq=False)
class AdaptiveState:
    """Deviation magnitude and direction of the colluding update u_g - lam * s."""

    lam: float
    s: np.ndarray
    floor: float = constants.LAMBDA_FLOOR

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    @property
    def exhausted(self) -> bool:
        return self.lam <= self.floor

    def halved(self) -> "AdaptiveState":
        return AdaptiveState(self.lam / 2, self.s, self.floor)


class LambdaSearch(NamedTuple):
    lam: float
    accepted: bool
    probes: int


def _require_nonempty(shard: ClientShard) -> None:
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has no local data")


def train_local(
    global_params: ParamVector,
    shard: ClientShard,
    spec: NetworkSpec,
    hyper: LocalTraining,
    seed,
) -> ParamVector:
    """u = w_after - w_global. The shard's training set is clean for benign clients, clean + poison otherwise."""
    _require_nonempty(shard)
    data = shard.training_set()
    trained, _ = fit(global_params, spec, data.inputs, data.labels, hyper, seed)
    return trained - global_params


def pgd_project(update: ParamVector, epsilon: float = constants.PGD_EPSILON) -> ParamVector:
    """epsilon * u / |u|; a zero update stays zero."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    update = np.asarray(update, dtype=np.float64)
    norm = np.linalg.norm(update)
    if norm == 0.0:
        return np.zeros_like(update)
    return epsilon * update / norm


def _side_rng(seed) -> np.random.Generator:
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.default_rng(np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (1,)))


def smp_train(
    global_params: ParamVector,
    shard: ClientShard,
    spec: NetworkSpec,
    rho1: float,
    rho2: float,
    hyper: LocalTraining,
    seed,
) -> ParamVector:
    """
    Minimises rho1 * L(poisoned) + L(clean) + rho2 * |w - w_g| by SGD over the clean data.

    Each clean batch is paired with a poisoned batch of the same size. The distance term moves
    the parameters by lr * rho2 along -(w - w_g) / |w - w_g| after every step, stopping at w_g
    (no movement when w == w_g).
    """
    if len(shard.poisoned) == 0:
        raise ValueError(f"SMP needs poisoned data, client {shard.client_id} has none")
    if len(shard.clean) == 0:
        raise ValueError(f"SMP needs clean data, client {shard.client_id} has none")
    if rho1 < 0 or rho2 < 0:
        raise ValueError(f"rho1 and rho2 must be nonnegative, got {rho1}, {rho2}")
    poisoned = shard.poisoned
    poison_rng = _side_rng(seed)

    def poison_grad(params: ParamVector) -> np.ndarray:
        picks = poison_rng.choice(len(poisoned), size=min(hyper.batch_size, len(poisoned)), replace=False)
        _, grad = loss_and_grad(params, spec, (poisoned.inputs[picks], poisoned.labels[picks]))
        return rho1 * grad

    def pull_towards_global(params: ParamVector) -> ParamVector:
        offset = params - global_params
        distance = np.linalg.norm(offset)
        if distance == 0.0:
            return params
        return global_params + max(0.0, 1.0 - hyper.lr * rho2 / distance) * offset

    trained, _ = fit(
        global_params,
        spec,
        shard.clean.inputs,
        shard.clean.labels,
        hyper,
        seed,
        extra_grad=poison_grad if rho1 > 0 else None,
        after_step=pull_towards_global if rho2 > 0 else None,
    )
    return trained - global_params


def model_replacement_scale(update: ParamVector, tau: float) -> ParamVector:
    if tau < 1:
        raise ValueError(f"tau must be at least 1, got {tau}")
    return tau * np.asarray(update)


def craft_malicious_update(
    global_params: ParamVector,
    shard: ClientShard,
    spec: NetworkSpec,
    attack: AttackConfig,
    hyper: LocalTraining,
    seed,
) -> ParamVector:
    if attack.mode == "smp" and len(shard.poisoned) == 0:
        logger.debug(f"client {shard.client_id} holds no poison; training it as a benign client")
        update = train_local(global_params, shard, spec, hyper, seed)
    elif attack.mode == "smp":
        update = smp_train(global_params, shard, spec, attack.rho1, attack.rho2, hyper, seed)
    else:
        update = train_local(global_params, shard, spec, hyper, seed)
        if attack.mode == "pgd":
            update = pgd_project(update, attack.epsilon)
    if attack.replace_scale is not None:
        update = model_replacement_scale(update, attack.replace_scale)
    return update


def adaptive_craft(global_update_est: ParamVector, lam: float) -> ParamVector:
    """u_g - lam * sign(u_g), sign(0) = 0."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    global_update_est = np.asarray(global_update_est)
    return global_update_est - lam * np.sign(global_update_est)


# oracle(benign_updates, malicious_update, f) -> whether the f copies of malicious_update get through
Oracle = Callable[[Sequence[ParamVector], ParamVector, int], bool]


def binary_search_lambda(
    oracle: Oracle,
    benign_updates: Sequence[ParamVector],
    f: int,
    init_lambda: float = constants.LAMBDA_INIT,
    floor: float = constants.LAMBDA_FLOOR,
    global_update_est: ParamVector | None = None,
) -> LambdaSearch:
    """
    Probes lambda = init, init/2, init/4, ... until the oracle accepts or lambda <= floor.
    global_update_est defaults to the mean of the benign updates.
    """
    if f < 1:
        raise ValueError(f"need at least one malicious client, got f={f}")
    u_g = np.mean(np.vstack(benign_updates), axis=0) if global_update_est is None else global_update_est
    state = AdaptiveState(init_lambda, np.sign(u_g), floor)
    probes = 0
    while True:
        probes += 1
        if oracle(benign_updates, adaptive_craft(u_g, state.lam), f):
            logger.debug(f"lambda {state.lam:.3e} accepted after {probes} probes")
            return LambdaSearch(state.lam, True, probes)
        if state.exhausted:
            logger.debug(f"lambda search reached the floor after {probes} probes")
            return LambdaSearch(state.lam, False, probes)
        state = state.halved()


def _with_copies(benign_updates: Sequence[ParamVector], malicious: ParamVector, f: int) -> List[ParamVector]:
    return list(benign_updates) + [malicious] * f


def krum_oracle(benign_updates: Sequence[ParamVector], malicious: ParamVector, f: int) -> bool:
    """Accepted when Krum, told there are f Byzantine updates, picks one of the malicious copies."""
    updates = _with_copies(benign_updates, malicious, f)
    scores = krum_scores(squared_distances(np.vstack(updates)), f)
    return int(np.argmin(scores)) >= len(benign_updates)


def make_xmam_oracle(
    spec: NetworkSpec,
    probe: Tensor,
    config: AggregatorConfig | None = None,
    global_params: ParamVector | None = None,
) -> Oracle:
    """
    Accepted when every malicious copy lands in the major cluster.
    global_params is needed when config.probe_full_model is set, as for the deployed defense.
    """
    config = config or AggregatorConfig(kind="xmam")
    if config.probe_full_model and global_params is None:
        raise ValueError("probe_full_model needs the global parameters")

    def oracle(benign_updates: Sequence[ParamVector], malicious: ParamVector, f: int) -> bool:
        updates = _with_copies(benign_updates, malicious, f)
        result = xmam_aggregate(updates, spec, probe, config=config, global_params=global_params)
        malicious_ids = set(range(len(benign_updates), len(updates)))
        return malicious_ids <= set(result.preserved_ids)

    return oracle
