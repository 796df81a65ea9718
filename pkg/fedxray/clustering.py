"""
Density clustering of SLOUs and the PCA projection behind the scatter exports.

hdbscan follows the usual pipeline: mutual reachability -> minimum spanning tree (Prim, dense)
-> single linkage hierarchy -> condensed tree -> excess-of-mass selection.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from fedxray.constants import MIN_CLUSTER_SIZE, MIN_SAMPLES, SINGLE_CLUSTER_OUTLIER_FACTOR
from fedxray.loggers import setup_logger

logger = setup_logger(__name__)

NOISE = -1
# zero mutual-reachability distances are floored at this share of the largest spanning-tree edge
ZERO_DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray
    ids: Tuple[int, ...]

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError(f"points must be (n, d), got {points.shape}")
        if len(points) != len(self.ids):
            raise ValueError(f"{len(points)} points but {len(self.ids)} ids")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    @classmethod
    def of(cls, points, ids: Sequence[int] | None = None) -> "PointSet":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, tuple(range(len(points))) if ids is None else tuple(ids))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class ClusterResult:
    """
    labels: per point, the index of its cluster in `clusters`, or NOISE
    clusters: member ids, largest first; ties go to the smaller mean intra-cluster distance, then the smaller id
    passes: hierarchy nodes processed while condensing
    """

    labels: np.ndarray
    clusters: List[List[int]]
    mst_weight: float
    passes: int

    @property
    def major(self) -> List[int]:
        return self.clusters[0] if self.clusters else []

    @property
    def all_noise(self) -> bool:
        return len(self.clusters) == 0


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _as_pointset(points) -> PointSet:
    return points if isinstance(points, PointSet) else PointSet.of(points)


def mutual_reachability(points, min_samples: int = MIN_SAMPLES) -> np.ndarray:
    """
    d(a, b) = max(core(a), core(b), |a - b|), core = distance to the min_samples-th nearest other point.
    The diagonal is zero.
    """
    points = _as_pointset(points).points
    if len(points) < 2:
        raise ValueError(f"mutual reachability needs at least 2 points, got {len(points)}")
    if min_samples < 1:
        raise ValueError(f"min_samples must be at least 1, got {min_samples}")
    distances = pairwise_distances(points)
    k = min(min_samples, len(points) - 1)
    # column 0 of the sorted rows is the point itself
    core = np.sort(distances, axis=1)[:, k]
    reach = np.maximum(distances, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(reach, 0.0)
    return reach


def minimum_spanning_tree(matrix: np.ndarray) -> np.ndarray:
    """Prim's algorithm on a dense symmetric matrix. Rows of (from, to, weight) in insertion order."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(matrix)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = matrix[0].copy()
    source = np.zeros(n, dtype=np.int64)
    edges = np.zeros((n - 1, 3))
    for step in range(n - 1):
        nxt = int(np.argmin(np.where(in_tree, np.inf, best)))
        edges[step] = (source[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        closer = ~in_tree & (matrix[nxt] < best)
        best[closer] = matrix[nxt][closer]
        source[closer] = nxt
    return edges


def single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Merge rows (left, right, distance, size); merge i creates node n + i."""
    order = np.argsort(edges[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n - 1, dtype=np.int64)])

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    linkage = np.zeros((n - 1, 4))
    for i, e in enumerate(order):
        a, b, weight = int(edges[e, 0]), int(edges[e, 1]), edges[e, 2]
        ra, rb = find(a), find(b)
        node = n + i
        linkage[i] = (ra, rb, weight, size[ra] + size[rb])
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
    return linkage


def _descendants(linkage: np.ndarray, node: int, n: int) -> List[int]:
    result, queue = [], [node]
    while queue:
        result.extend(queue)
        queue = [int(c) for x in queue if x >= n for c in linkage[x - n, :2]]
    return result


def condense_tree(linkage: np.ndarray, min_cluster_size: int) -> Tuple[np.ndarray, int]:
    """
    Rows (parent, child, lambda, child_size). Points keep ids < n, clusters get ids >= n with the root at n.
    Returns the rows and the number of hierarchy nodes processed.
    """
    n = len(linkage) + 1
    floor = ZERO_DISTANCE_FLOOR * linkage[:, 2].max()
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    ignore = set()
    rows = []
    passes = 0

    def size(node: int) -> int:
        return 1 if node < n else int(linkage[node - n, 3])

    def drop_points(cluster: int, node: int, lam: float) -> None:
        for sub in _descendants(linkage, node, n):
            if sub < n:
                rows.append((cluster, sub, lam, 1))
            ignore.add(sub)

    for node in _descendants(linkage, root, n):
        if node < n or node in ignore:
            continue
        passes += 1
        left, right, distance = int(linkage[node - n, 0]), int(linkage[node - n, 1]), linkage[node - n, 2]
        lam = 1.0 / max(distance, floor)
        cluster = relabel[node]
        left_size, right_size = size(left), size(right)
        if left_size >= min_cluster_size and right_size >= min_cluster_size:
            for child, child_size in ((left, left_size), (right, right_size)):
                relabel[child] = next_label
                rows.append((cluster, next_label, lam, child_size))
                next_label += 1
        elif left_size < min_cluster_size and right_size < min_cluster_size:
            drop_points(cluster, left, lam)
            drop_points(cluster, right, lam)
        elif left_size < min_cluster_size:
            relabel[right] = cluster
            drop_points(cluster, left, lam)
        else:
            relabel[left] = cluster
            drop_points(cluster, right, lam)
    return np.array(rows, dtype=np.float64).reshape(-1, 4), passes


def compute_stability(condensed: np.ndarray) -> Dict[int, float]:
    parents = condensed[:, 0].astype(np.int64)
    children = condensed[:, 1].astype(np.int64)
    root = int(parents.min())
    birth = {root: 0.0}
    for child, lam, child_size in zip(children, condensed[:, 2], condensed[:, 3]):
        if child_size > 1:
            birth[int(child)] = lam
    stability = {cluster: 0.0 for cluster in birth}
    for parent, lam, child_size in zip(parents, condensed[:, 2], condensed[:, 3]):
        stability[int(parent)] += (lam - birth[int(parent)]) * child_size
    return stability


def select_clusters(condensed: np.ndarray, allow_single_cluster: bool) -> List[int]:
    """Excess-of-mass: a cluster is kept unless its child clusters are strictly more stable together."""
    stability = compute_stability(condensed)
    root = int(condensed[:, 0].min())
    child_clusters: Dict[int, List[int]] = {}
    for parent, child, _, child_size in condensed:
        if child_size > 1:
            child_clusters.setdefault(int(parent), []).append(int(child))

    nodes = sorted(stability, reverse=True)
    if not allow_single_cluster:
        nodes.remove(root)
    is_cluster = {node: True for node in nodes}
    for node in nodes:
        subtree = sum(stability[child] for child in child_clusters.get(node, []))
        if subtree > stability[node]:
            is_cluster[node] = False
            stability[node] = subtree
        else:
            queue = list(child_clusters.get(node, []))
            while queue:
                descendant = queue.pop()
                is_cluster[descendant] = False
                queue.extend(child_clusters.get(descendant, []))
    return sorted(node for node, keep in is_cluster.items() if keep)


def _order_clusters(groups: List[np.ndarray], points: PointSet, distances: np.ndarray) -> List[np.ndarray]:
    def key(members: np.ndarray):
        if len(members) > 1:
            block = distances[np.ix_(members, members)]
            spread = block.sum() / (len(members) * (len(members) - 1))
        else:
            spread = 0.0
        return (-len(members), spread, min(points.ids[m] for m in members))

    return sorted(groups, key=key)


def coincident_groups(points, tolerance: float = 0.0) -> List[List[int]]:
    """Row indices of points that chain together within `tolerance`, only groups of two or more."""
    points = np.asarray(points, dtype=np.float64)
    close = pairwise_distances(points) <= tolerance
    seen = np.zeros(len(points), dtype=bool)
    groups = []
    for start in range(len(points)):
        if seen[start]:
            continue
        seen[start] = True
        group, frontier = [start], [start]
        while frontier:
            current = frontier.pop()
            for other in np.flatnonzero(close[current] & ~seen):
                seen[other] = True
                group.append(int(other))
                frontier.append(int(other))
        if len(group) > 1:
            groups.append(sorted(group))
    return groups


def hdbscan(
    points,
    min_cluster_size: int = MIN_CLUSTER_SIZE,
    min_samples: int = MIN_SAMPLES,
    allow_single_cluster: bool = True,
    single_cluster_outlier_factor: float = SINGLE_CLUSTER_OUTLIER_FACTOR,
) -> ClusterResult:
    """
    points: a PointSet, or an (n, d) array whose ids default to 0..n-1

    allow_single_cluster lets the root win the excess-of-mass selection. When it does, a point is
    noise only if it left the root at a distance above single_cluster_outlier_factor times the
    median distance at which points left the root.
    """
    points = _as_pointset(points)
    n = len(points)
    if n < 2:
        raise ValueError(f"hdbscan needs at least 2 points, got {n}")
    if min_cluster_size < 2:
        raise ValueError(f"min_cluster_size must be at least 2, got {min_cluster_size}")
    reach = mutual_reachability(points, min_samples)
    distances = pairwise_distances(points.points)
    edges = minimum_spanning_tree(reach)
    mst_weight = float(edges[:, 2].sum())

    if edges[:, 2].max() == 0.0:
        return ClusterResult(np.zeros(n, dtype=np.int64), [list(points.ids)], 0.0, 0)

    condensed, passes = condense_tree(single_linkage(edges, n), min_cluster_size)
    selected = set(select_clusters(condensed, allow_single_cluster))
    root = n

    cluster_parent = {}
    exit_of = {}
    for parent, child, lam, child_size in condensed:
        if child_size > 1:
            cluster_parent[int(child)] = int(parent)
        else:
            exit_of[int(child)] = (int(parent), lam)

    assigned = np.full(n, NOISE, dtype=np.int64)
    for point in range(n):
        cluster = exit_of[point][0]
        while cluster not in selected and cluster != root:
            cluster = cluster_parent[cluster]
        if cluster in selected:
            assigned[point] = cluster

    if root in selected and any(exit_of[p][0] == root for p in range(n)):
        leaving_root = [p for p in range(n) if exit_of[p][0] == root]
        exit_distance = {p: 1.0 / exit_of[p][1] for p in leaving_root}
        cutoff = single_cluster_outlier_factor * float(np.median(list(exit_distance.values())))
        for p in leaving_root:
            if exit_distance[p] > cutoff:
                assigned[p] = NOISE

    groups = [np.flatnonzero(assigned == cluster) for cluster in sorted(selected)]
    groups = _order_clusters([g for g in groups if len(g)], points, distances)
    labels = np.full(n, NOISE, dtype=np.int64)
    for index, members in enumerate(groups):
        labels[members] = index
    clusters = [sorted(points.ids[m] for m in members) for members in groups]
    logger.debug(f"hdbscan: {len(clusters)} clusters sizes {[len(c) for c in clusters]}, {passes} passes")
    return ClusterResult(labels, clusters, mst_weight, passes)


@dataclass(frozen=True, eq=False)
class PcaResult:
    coords: np.ndarray  # (n, k)
    components: np.ndarray  # (k, d), unit rows
    explained_variance: np.ndarray  # (k,), descending


def _power_iteration(matrix: np.ndarray, k: int, tol: float, max_iter: int) -> Tuple[np.ndarray, np.ndarray]:
    matrix = np.array(matrix, copy=True)
    size = len(matrix)
    rng = np.random.default_rng(0)
    vectors, values = [], []
    for _ in range(k):
        v = rng.normal(size=size)
        for u in vectors:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = matrix @ v
            for u in vectors:
                w -= (u @ w) * u
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            converged = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if converged:
                break
        value = float(v @ matrix @ v)
        vectors.append(v)
        values.append(max(value, 0.0))
        matrix -= value * np.outer(v, v)
    return np.array(vectors), np.array(values)


def pca_project(points, k: int = 2, tol: float = 1e-8, max_iter: int = 20_000) -> PcaResult:
    """
    Top-k principal coordinates by power iteration with deflation. Uses the n x n Gram matrix
    when the dimension exceeds the number of points. Component signs are arbitrary.
    """
    x = np.asarray(points.points if isinstance(points, PointSet) else points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"pca_project needs an (n >= 2, d) array, got {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must lie in [1, {min(n, d)}], got {k}")
    centered = x - x.mean(axis=0)
    if d <= n:
        components, variance = _power_iteration(centered.T @ centered / (n - 1), k, tol, max_iter)
    else:
        left, variance = _power_iteration(centered @ centered.T / (n - 1), k, tol, max_iter)
        components = left @ centered
        norms = np.linalg.norm(components, axis=1, keepdims=True)
        components = np.divide(components, norms, out=np.zeros_like(components), where=norms > 0)
    return PcaResult(centered @ components.T, components, variance)
