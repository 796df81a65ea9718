from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from fedxray import constants
from fedxray.clustering import NOISE, PointSet, coincident_groups, hdbscan
from fedxray.engine import forward
from fedxray.loggers import setup_logger
from fedxray.network import DimensionError, NetworkSpec, ParamVector, Tensor
from fedxray.utils import Stopwatch

logger = setup_logger(__name__)


@dataclass(frozen=True)
class AggregatorConfig:
    """
    kind: one of fedavg, ndc, rsa, rfa, krum, multi-krum, xmam
    delta: NDC clipping norm
    beta_r, beta_r_decay: RSA step at round t is beta_r * beta_r_decay ** t
    v, mu, max_rounds: RFA smoothing, tolerance and iteration cap
    f: assumed Byzantine count for the Krum family
    eta_g: global learning rate, applied once by the server
    probe, probe_seed: XMAM probe matrix, "ones" or seeded "random"
    sum_preserved: XMAM sums the preserved updates instead of averaging them
    probe_full_model: XMAM probes w_g + u instead of u (experimental)
    min_cluster_size: HDBSCAN minimum cluster size, None for a strict majority of the round (tau // 2 + 1)
    duplicate_tolerance: SLOUs this close count as copies; a group of copies smaller than a majority is
        noise. None turns the check off
    """

    kind: str = "fedavg"
    delta: float = constants.NDC_DELTA
    beta_r: float = constants.RSA_BETA
    beta_r_decay: float = constants.RSA_BETA_DECAY
    v: float = constants.RFA_SMOOTHING
    mu: float = constants.RFA_TOLERANCE
    max_rounds: int = constants.RFA_MAX_ROUNDS
    f: int | None = None
    eta_g: float = constants.GLOBAL_LEARNING_RATE
    probe: str = "ones"
    probe_seed: int = 0
    sum_preserved: bool = False
    probe_full_model: bool = False
    min_cluster_size: int | None = None
    min_samples: int = constants.MIN_SAMPLES
    allow_single_cluster: bool = True
    single_cluster_outlier_factor: float = constants.SINGLE_CLUSTER_OUTLIER_FACTOR
    duplicate_tolerance: float | None = constants.DUPLICATE_TOLERANCE
    n_jobs: int = 1

    def __post_init__(self):
        if self.kind not in constants.AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.kind!r}, expected one of {constants.AGGREGATORS}")
        if self.delta <= 0 or self.v <= 0 or self.mu <= 0 or self.beta_r <= 0:
            raise ValueError("delta, v, mu and beta_r must be positive")
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be at least 1, got {self.max_rounds}")
        if self.f is not None and self.f < 0:
            raise ValueError(f"f must be nonnegative, got {self.f}")
        if self.probe not in ("ones", "random"):
            raise ValueError(f"probe must be 'ones' or 'random', got {self.probe!r}")
        if self.min_cluster_size is not None and self.min_cluster_size < 2:
            raise ValueError(f"min_cluster_size must be at least 2, got {self.min_cluster_size}")
        if self.duplicate_tolerance is not None and self.duplicate_tolerance < 0:
            raise ValueError(f"duplicate_tolerance must be nonnegative, got {self.duplicate_tolerance}")


@dataclass(frozen=True, eq=False)
class AggregationResult:
    """global_update is u^{t+1} before the server applies eta_g."""

    global_update: ParamVector
    preserved_ids: Tuple[int, ...]
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    screening_seconds: float = 0.0

    def __post_init__(self):
        if len(self.preserved_ids) == 0:
            raise ValueError("an aggregation must preserve at least one update")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    lengths = {len(u) for u in updates}
    if len(lengths) != 1:
        raise DimensionError(f"updates differ in length: {sorted(lengths)}")
    return np.vstack([np.asarray(u, dtype=np.float64) for u in updates])


def _ids(ids, tau: int) -> Tuple[int, ...]:
    ids = tuple(range(tau)) if ids is None else tuple(int(i) for i in ids)
    if len(ids) != tau:
        raise ValueError(f"{tau} updates but {len(ids)} ids")
    return ids


def _weights(weights, tau: int) -> np.ndarray:
    if weights is None:
        return np.full(tau, 1.0 / tau)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (tau,) or np.any(weights <= 0):
        raise ValueError(f"weights must be {tau} positive numbers")
    return weights / weights.sum()


def fedavg(updates, weights=None) -> ParamVector:
    stacked = _stack(updates)
    return _weights(weights, len(stacked)) @ stacked


def clip_norm(update: ParamVector, delta: float) -> ParamVector:
    """u / max(1, |u| / delta)"""
    return update / max(1.0, np.linalg.norm(update) / delta)


def ndc(updates, delta: float = constants.NDC_DELTA, weights=None) -> ParamVector:
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    stacked = _stack(updates)
    clipped = np.vstack([clip_norm(u, delta) for u in stacked])
    return _weights(weights, len(stacked)) @ clipped


def rsa(updates, beta_r: float) -> ParamVector:
    """beta_r * sum of elementwise signs, sign(0) = 0."""
    if beta_r <= 0:
        raise ValueError(f"beta_r must be positive, got {beta_r}")
    return beta_r * np.sign(_stack(updates)).sum(axis=0)


def rfa_objective(z: np.ndarray, stacked: np.ndarray, weights: np.ndarray, v: float) -> float:
    return float(weights @ np.maximum(v, np.linalg.norm(stacked - z, axis=1)))


def weiszfeld(
    updates,
    weights=None,
    v: float = constants.RFA_SMOOTHING,
    mu: float = constants.RFA_TOLERANCE,
    R: int = constants.RFA_MAX_ROUNDS,
) -> Tuple[ParamVector, int]:
    """Smoothed Weiszfeld iterations from the weighted mean; returns the point and the rounds used."""
    if v <= 0 or mu <= 0 or R < 1:
        raise ValueError(f"need v > 0, mu > 0, R >= 1, got v={v}, mu={mu}, R={R}")
    stacked = _stack(updates)
    p = _weights(weights, len(stacked))
    z = p @ stacked
    for r in range(1, R + 1):
        q = p / np.maximum(v, np.linalg.norm(stacked - z, axis=1))
        z_next = q @ stacked / q.sum()
        moved = np.linalg.norm(z_next - z)
        z = z_next
        if moved < mu:
            return z, r
    return z, R


def rfa(
    updates,
    weights=None,
    v: float = constants.RFA_SMOOTHING,
    mu: float = constants.RFA_TOLERANCE,
    R: int = constants.RFA_MAX_ROUNDS,
) -> ParamVector:
    return weiszfeld(updates, weights, v, mu, R)[0]


def squared_distances(stacked: np.ndarray) -> np.ndarray:
    tau = len(stacked)
    distances = np.zeros((tau, tau))
    for i in range(tau):
        for j in range(i + 1, tau):
            diff = stacked[i] - stacked[j]
            distances[i, j] = distances[j, i] = diff @ diff
    return distances


def _check_krum(tau: int, f: int) -> None:
    if f is None or f < 0:
        raise ValueError(f"Krum needs a nonnegative f, got {f}")
    if tau < f + 3:
        raise ValueError(f"Krum needs tau >= f + 3, got tau={tau}, f={f}")


def krum_scores(distances: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to the tau - f - 2 nearest other updates."""
    tau = len(distances)
    _check_krum(tau, f)
    neighbours = tau - f - 2
    masked = distances + np.diag(np.full(tau, np.inf))
    return np.sort(masked, axis=1)[:, :neighbours].sum(axis=1)


def krum(updates, f: int) -> Tuple[ParamVector, np.ndarray]:
    """The update with the lowest score (ties go to the lowest index) and every score."""
    stacked = _stack(updates)
    scores = krum_scores(squared_distances(stacked), f)
    return stacked[int(np.argmin(scores))], scores


def multi_krum_select(distances: np.ndarray, f: int) -> List[int]:
    tau = len(distances)
    _check_krum(tau, f)
    remaining = list(range(tau))
    selected = []
    while len(selected) < tau - f - 2:
        sub = distances[np.ix_(remaining, remaining)]
        chosen = remaining[int(np.argmin(krum_scores(sub, f)))]
        selected.append(chosen)
        remaining.remove(chosen)
    return selected


def multi_krum(updates, f: int) -> ParamVector:
    stacked = _stack(updates)
    selected = multi_krum_select(squared_distances(stacked), f)
    return stacked[sorted(selected)].mean(axis=0)


def make_probe(spec: NetworkSpec, kind: str = "ones", seed: int = 0) -> Tensor:
    if kind == "ones":
        return np.ones(spec.input_shape)
    if kind == "random":
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=spec.input_shape)
    raise ValueError(f"unknown probe kind {kind!r}")


def xmam_examine(
    update: ParamVector,
    spec: NetworkSpec,
    probe: Tensor,
    global_params: ParamVector | None = None,
) -> np.ndarray:
    """SLOU: the softmax output of the network whose parameters are the update itself."""
    update = np.asarray(update)
    if update.ndim != 1 or len(update) != spec.num_params:
        raise DimensionError(f"{spec.name} expects updates of length {spec.num_params}, got {update.shape}")
    params = update if global_params is None else global_params + update
    return forward(params, spec, probe)


def examine_all(
    stacked: np.ndarray,
    spec: NetworkSpec,
    probe: Tensor,
    global_params: ParamVector | None = None,
    n_jobs: int = 1,
) -> np.ndarray:
    if n_jobs == 1:
        slous = [xmam_examine(u, spec, probe, global_params) for u in stacked]
    else:
        slous = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(xmam_examine)(u, spec, probe, global_params) for u in stacked
        )
    return np.vstack(slous)


@dataclass(frozen=True, eq=False)
class XmamScreening:
    labels: np.ndarray
    major: List[int]
    copies: List[int]
    passes: int = 0


def xmam_screen(slous: np.ndarray, ids: Tuple[int, ...], config: AggregatorConfig) -> XmamScreening:
    """
    Labels every SLOU and picks the major cluster.

    Copies are groups of coincident SLOUs smaller than a majority; they are noise and never clustered.
    The rest is clustered with min_cluster_size capped at the number of points left.
    """
    tau = len(slous)
    majority = tau // 2 + 1
    copies: List[int] = []
    if config.duplicate_tolerance is not None:
        for group in coincident_groups(slous, config.duplicate_tolerance):
            if len(group) < majority:
                copies.extend(group)
    dropped = set(copies)
    rest = [row for row in range(tau) if row not in dropped]
    labels = np.full(tau, NOISE, dtype=np.int64)
    if len(rest) < 2:
        labels[rest] = 0
        return XmamScreening(labels, [ids[row] for row in rest], sorted(ids[row] for row in copies))

    clustering = hdbscan(
        PointSet(slous[rest], [ids[row] for row in rest]),
        min_cluster_size=min(config.min_cluster_size or majority, len(rest)),
        min_samples=config.min_samples,
        allow_single_cluster=config.allow_single_cluster,
        single_cluster_outlier_factor=config.single_cluster_outlier_factor,
    )
    labels[rest] = clustering.labels
    return XmamScreening(labels, clustering.major, sorted(ids[row] for row in copies), clustering.passes)


def xmam_aggregate(
    updates,
    spec: NetworkSpec,
    probe: Tensor,
    eta_g: float = 1.0,
    *,
    ids: Sequence[int] | None = None,
    config: AggregatorConfig | None = None,
    global_params: ParamVector | None = None,
) -> AggregationResult:
    """
    Probe every update, cluster the SLOUs, keep the largest cluster and average it (scaled by eta_g).
    If clustering finds only noise, every update is kept and diagnostics["all_noise"] is set.
    """
    config = config or AggregatorConfig(kind="xmam")
    stacked = _stack(updates)
    if len(stacked) < 2:
        raise ValueError(f"XMAM needs at least 2 updates, got {len(stacked)}")
    ids = _ids(ids, len(stacked))

    with Stopwatch() as watch:
        slous = examine_all(
            stacked, spec, probe, global_params if config.probe_full_model else None, n_jobs=config.n_jobs
        )
        screening = xmam_screen(slous, ids, config)

    if screening.copies:
        logger.info(f"XMAM dropped {len(screening.copies)} coincident SLOUs: {screening.copies}")
    all_noise = not screening.major
    if all_noise:
        logger.warning("XMAM clustering found no cluster; keeping every update")
        preserved = list(ids)
    else:
        preserved = screening.major
    rows = [ids.index(i) for i in preserved]
    combined = stacked[rows].sum(axis=0) if config.sum_preserved else stacked[rows].mean(axis=0)
    logger.debug(f"XMAM kept {len(preserved)}/{len(ids)}: {preserved}")
    return AggregationResult(
        eta_g * combined,
        tuple(preserved),
        {
            "slous": slous,
            "cluster_labels": screening.labels,
            "copies": screening.copies,
            "all_noise": all_noise,
            "passes": screening.passes,
        },
        watch.seconds,
    )


def aggregate(
    updates,
    config: AggregatorConfig,
    *,
    ids: Sequence[int] | None = None,
    round_index: int = 0,
    weights=None,
    spec: NetworkSpec | None = None,
    probe: Tensor | None = None,
    global_params: ParamVector | None = None,
) -> AggregationResult:
    """Runs the rule named by config.kind. The returned update is unscaled; the server applies eta_g."""
    stacked = _stack(updates)
    ids = _ids(ids, len(stacked))
    kind = config.kind

    if kind == "fedavg":
        return AggregationResult(fedavg(stacked, weights), ids, {}, 0.0)
    if kind == "ndc":
        with Stopwatch() as watch:
            norms = np.linalg.norm(stacked, axis=1)
            result = ndc(stacked, config.delta, weights)
        return AggregationResult(result, ids, {"norms": norms}, watch.seconds)
    if kind == "rsa":
        beta = config.beta_r * config.beta_r_decay**round_index
        with Stopwatch() as watch:
            result = rsa(stacked, beta)
        return AggregationResult(result, ids, {"beta_r": beta}, watch.seconds)
    if kind == "rfa":
        with Stopwatch() as watch:
            result, rounds = weiszfeld(stacked, weights, config.v, config.mu, config.max_rounds)
        return AggregationResult(result, ids, {"rfa_rounds": rounds}, watch.seconds)
    if kind in ("krum", "multi-krum"):
        with Stopwatch() as watch:
            distances = squared_distances(stacked)
            if kind == "krum":
                scores = krum_scores(distances, config.f)
                chosen = [int(np.argmin(scores))]
            else:
                scores = krum_scores(distances, config.f)
                chosen = sorted(multi_krum_select(distances, config.f))
        return AggregationResult(
            stacked[chosen].mean(axis=0),
            tuple(ids[i] for i in chosen),
            {"krum_scores": scores},
            watch.seconds,
        )
    if kind == "xmam":
        if spec is None:
            raise ValueError("XMAM needs the network spec")
        if probe is None:
            probe = make_probe(spec, config.probe, config.probe_seed)
        if config.probe_full_model and global_params is None:
            raise ValueError("probe_full_model needs the global parameters")
        return xmam_aggregate(stacked, spec, probe, 1.0, ids=ids, config=config, global_params=global_params)
    raise ValueError(f"unknown aggregator {kind!r}")
