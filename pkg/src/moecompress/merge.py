"""Expert merging baselines.

M-SMoE: dominant experts by usage, remaining experts join the dominant one
whose gate trace is most similar, members aligned by weight matching and
frequency-averaged. HC-SMoE: average-linkage agglomerative clustering of
representative vectors, then the same merge rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibStats, representative_vectors
from .errors import ConfigError, DimensionError, DomainError
from .moe import ExpertWeights, MoeLayer, RouterConfig, combine, expert_forward, gate_compute
from .numerics import Assignment, as_f64, linear_assignment

METHODS = ("msmoe", "hcsmoe")


@dataclass(frozen=True)
class Clustering:
    assignment: np.ndarray  # expert -> cluster id
    clusters: tuple[tuple[int, ...], ...]
    method: str
    max_cluster_size: int | None = None

    @classmethod
    def from_clusters(cls, clusters, method: str, max_cluster_size: int | None = None) -> "Clustering":
        clusters = tuple(sorted(tuple(sorted(int(i) for i in c)) for c in clusters))
        K = sum(len(c) for c in clusters)
        assignment = np.full(K, -1, dtype=np.int64)
        for cid, members in enumerate(clusters):
            assignment[list(members)] = cid
        if sorted(i for c in clusters for i in c) != list(range(K)):
            raise DomainError("clusters do not partition the experts")
        return cls(assignment=assignment, clusters=clusters, method=method, max_cluster_size=max_cluster_size)

    @property
    def num_experts(self) -> int:
        return len(self.assignment)


@dataclass(frozen=True)
class MergePlan:
    clustering: Clustering
    anchors: tuple[int, ...]  # one per cluster
    permutations: tuple[np.ndarray, ...]  # one per expert, aligning it to its anchor
    weights: np.ndarray  # one per expert; sums to 1 within each cluster
    ratio: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def index_map(self) -> np.ndarray:
        return self.clustering.assignment

    def to_json(self) -> dict:
        c = self.clustering
        return {
            "type": "merge", "method": c.method, "ratio": self.ratio,
            "max_cluster_size": c.max_cluster_size,
            "clusters": [list(m) for m in c.clusters], "anchors": list(self.anchors),
            "permutations": [[int(i) for i in p] for p in self.permutations],
            "weights": [float(w) for w in self.weights], **self.extra,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MergePlan":
        if obj.get("type") != "merge":
            raise ConfigError("not a merge plan")
        clustering = Clustering.from_clusters(obj["clusters"], obj["method"], obj.get("max_cluster_size"))
        return cls(clustering=clustering, anchors=tuple(obj["anchors"]),
                   permutations=tuple(np.asarray(p, dtype=np.int64) for p in obj["permutations"]),
                   weights=np.asarray(obj["weights"], dtype=np.float64), ratio=obj.get("ratio"))


@dataclass(frozen=True)
class MergedGates:
    gates: np.ndarray  # (n, K') summed gates per merged expert
    mask: np.ndarray  # (n, K') merged expert has at least one active member


@dataclass(frozen=True)
class MergedLayer:
    """Merged experts behind the untouched K-row router.

    Original gates are computed as before and summed through ``index_map``.
    """

    router: RouterConfig
    experts: tuple[ExpertWeights, ...]
    shared_experts: tuple[ExpertWeights, ...]
    index_map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.index_map, dtype=np.int64)
        object.__setattr__(self, "index_map", m)
        if m.shape != (self.router.num_experts,):
            raise DimensionError("index_map needs one entry per router row")
        if sorted(set(m.tolist())) != list(range(len(self.experts))):
            raise DomainError("index_map must be onto the merged experts")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].d

    @property
    def d_ff(self) -> int:
        return self.experts[0].d_ff

    @property
    def top_k(self) -> int:
        return self.router.top_k

    def routing(self, x) -> MergedGates:
        g = gate_compute(self.router, np.atleast_2d(as_f64(x)))
        gates = np.zeros((g.gates.shape[0], self.num_experts))
        mask = np.zeros(gates.shape, dtype=bool)
        orig_mask = g.mask
        for k, c in enumerate(self.index_map):
            gates[:, c] += g.gates[:, k]
            mask[:, c] |= orig_mask[:, k]
        return MergedGates(gates=gates, mask=mask)

    def expert_output(self, k: int, x) -> np.ndarray:
        return expert_forward(self.experts[k], x)

    def expert_outputs(self, x) -> np.ndarray:
        xb = np.atleast_2d(as_f64(x))
        return np.stack([expert_forward(e, xb) for e in self.experts])

    def shared_output(self, x) -> np.ndarray:
        x = as_f64(x)
        out = np.zeros(x.shape)
        for s in self.shared_experts:
            out = out + expert_forward(s, x)
        return out

    def forward(self, x):
        x = as_f64(x)
        xb = np.atleast_2d(x)
        g = self.routing(xb)
        y = combine(g.gates, self.expert_outputs(xb)) + self.shared_output(xb)
        return (y[0], g) if x.ndim == 1 else (y, g)


def weight_matching_permutation(anchor: ExpertWeights, other: ExpertWeights) -> Assignment:
    """Align the intermediate units of ``other`` to ``anchor``.

    ``perm[p]`` is the unit of ``other`` matched to anchor unit ``p``. One
    hidden layer means a single assignment solve suffices.
    """
    if (anchor.d, anchor.d_ff) != (other.d, other.d_ff):
        raise DimensionError("experts have different shapes")
    sim = (anchor.w_up @ other.w_up.T + anchor.w_gate @ other.w_gate.T
           + anchor.w_down.T @ other.w_down)
    return linear_assignment(sim, maximize=True)


def apply_permutation(e: ExpertWeights, perm) -> ExpertWeights:
    p = perm.perm if isinstance(perm, Assignment) else np.asarray(perm, dtype=np.int64)
    if p.shape != (e.d_ff,):
        raise DimensionError(f"permutation of length {p.shape} for d_ff={e.d_ff}")
    return ExpertWeights(e.w_up[p], e.w_gate[p], e.w_down[:, p])


def merge_weights(nu, members) -> np.ndarray:
    counts = np.asarray([float(nu[i]) for i in members])
    if counts.sum() <= 0:
        return np.full(len(members), 1.0 / len(members))
    return counts / counts.sum()


def _average(experts, weights) -> ExpertWeights:
    if len(experts) == 1:
        return experts[0]
    mats = {}
    for name in ("w_up", "w_gate", "w_down"):
        acc = np.zeros_like(getattr(experts[0], name))
        for e, w in zip(experts, weights):
            acc += w * getattr(e, name)
        mats[name] = acc
    return ExpertWeights(**mats)


def merge_cluster(members, anchor: int, nu) -> ExpertWeights:
    """Frequency-weighted average of ``members`` after aligning each to
    ``members[anchor]``. All-zero counts fall back to uniform weights."""
    if not members:
        raise DomainError("cannot merge an empty cluster")
    if len(members) == 1:
        return members[0]
    ref = members[anchor]
    aligned = [m if i == anchor else apply_permutation(m, weight_matching_permutation(ref, m))
               for i, m in enumerate(members)]
    return _average(aligned, merge_weights(nu, range(len(members))))


def _check_merge_ratio(K: int, ratio: float) -> int:
    if not 0 <= ratio < 1:
        raise ConfigError(f"merge ratio {ratio} outside [0, 1)")
    m = K - int(math.floor(K * ratio + 1e-12))
    if m < 1:
        raise ConfigError(f"ratio {ratio} leaves no clusters for {K} experts")
    return m


def _rank_by_usage(nu) -> list[int]:
    return sorted(range(len(nu)), key=lambda i: (-nu[i], i))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - (a @ b) / (na * nb))


def cluster_msmoe(stats: CalibStats, ratio: float, num_dominant: int | None = None) -> Clustering:
    """Dominant experts are the top-m by usage; each other expert joins the
    dominant expert with the most similar gate trace (cosine over tokens).

    An expert whose gate trace is all zero joins the most-used dominant expert.
    ``num_dominant`` overrides m, e.g. from :func:`allocate_dominant_global`.
    """
    K = stats.num_experts
    m = _check_merge_ratio(K, ratio) if num_dominant is None else int(num_dominant)
    if not 1 <= m <= K:
        raise ConfigError(f"{m} dominant experts for {K} experts")
    nu = stats.nu
    dominant = sorted(_rank_by_usage(nu)[:m])
    best_dominant = _rank_by_usage(nu)[0]
    trace = stats.gate_trace
    clusters = {i: [i] for i in dominant}
    for j in range(K):
        if j in clusters:
            continue
        if not np.any(trace[j]):
            clusters[best_dominant].append(j)
            continue
        dists = [cosine_distance(trace[i], trace[j]) for i in dominant]
        clusters[dominant[int(np.argmin(dists))]].append(j)
    return Clustering.from_clusters(clusters.values(), "msmoe")


def allocate_dominant_global(nu_per_layer, ratio: float) -> list[int]:
    """Dominant-expert counts per layer from a global usage ranking.

    The top total-m experts across all layers are dominant; each layer keeps
    at least one.
    """
    sizes = [len(n) for n in nu_per_layer]
    total_keep = _check_merge_ratio(sum(sizes), ratio)
    pool = sorted(((-float(n[i]), li, i) for li, n in enumerate(nu_per_layer) for i in range(len(n))))
    counts = [0] * len(sizes)
    for _, li, _i in pool[:total_keep]:
        counts[li] += 1
    for li in range(len(counts)):
        counts[li] = max(counts[li], 1)
    return counts


def pairwise_distances(vectors: np.ndarray, metric: str = "cosine") -> np.ndarray:
    A = as_f64(vectors)
    K = A.shape[0]
    if metric == "cosine":
        D = np.ones((K, K))
        norms = np.linalg.norm(A, axis=1)
        for i in range(K):
            for j in range(K):
                if norms[i] > 0 and norms[j] > 0:
                    D[i, j] = 1.0 - (A[i] @ A[j]) / (norms[i] * norms[j])
        np.fill_diagonal(D, 0.0)
        return D
    if metric == "euclidean":
        return np.linalg.norm(A[:, None, :] - A[None, :, :], axis=-1)
    raise ConfigError(f"unknown metric {metric!r}")


def agglomerate(D: np.ndarray, num_clusters: int, max_cluster_size: int | None = None):
    """Average-linkage agglomeration on a precomputed distance matrix.

    Closest pair first, ties to the lexicographically smallest pair (clusters
    are ordered by their smallest member). Joins exceeding ``max_cluster_size``
    are skipped.
    """
    K = D.shape[0]
    if max_cluster_size is not None and math.ceil(K / max_cluster_size) > num_clusters:
        raise ConfigError(f"{num_clusters} clusters unreachable with cluster size cap {max_cluster_size}")
    clusters = [[i] for i in range(K)]
    Dc = np.array(D, dtype=np.float64)
    while len(clusters) > num_clusters:
        n = len(clusters)
        sizes = np.array([len(c) for c in clusters])
        cand = np.triu(np.ones((n, n), dtype=bool), k=1)
        if max_cluster_size is not None:
            cand &= (sizes[:, None] + sizes[None, :]) <= max_cluster_size
        if not cand.any():
            raise ConfigError("no admissible join left under the cluster size cap")
        flat = np.where(cand, Dc, np.inf).ravel()
        a, b = divmod(int(np.argmin(flat)), n)
        na, nb = sizes[a], sizes[b]
        row = (na * Dc[a] + nb * Dc[b]) / (na + nb)
        Dc[a, :] = row
        Dc[:, a] = row
        Dc[a, a] = 0.0
        Dc = np.delete(np.delete(Dc, b, axis=0), b, axis=1)
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return clusters


def cluster_hcsmoe(stats: CalibStats, ratio: float, max_cluster_size: int | None = None,
                   metric: str = "cosine") -> Clustering:
    """Average-linkage clustering of representative vectors.

    ``metric="euclidean"`` is offered as an alternative distance.
    """
    K = stats.num_experts
    target = _check_merge_ratio(K, ratio)
    if max_cluster_size is not None and max_cluster_size < 1:
        raise ConfigError("max_cluster_size must be positive")
    D = pairwise_distances(representative_vectors(stats), metric)
    clusters = agglomerate(D, target, max_cluster_size)
    return Clustering.from_clusters(clusters, "hcsmoe", max_cluster_size)


def choose_anchor(members, nu) -> int:
    return min(members, key=lambda i: (-nu[i], i))


def build_merge_plan(layer: MoeLayer, clustering: Clustering, nu, ratio: float | None = None) -> MergePlan:
    """Anchors (most-used member), per-expert alignment permutations and
    frequency weights for every cluster."""
    if clustering.num_experts != layer.num_experts:
        raise DomainError("clustering and layer disagree on the expert count")
    K = layer.num_experts
    perms: list[np.ndarray] = [np.arange(layer.d_ff)] * K
    weights = np.zeros(K)
    anchors = []
    for members in clustering.clusters:
        anchor = choose_anchor(members, nu)
        anchors.append(anchor)
        for i, w in zip(members, merge_weights(nu, members)):
            weights[i] = w
            if i != anchor:
                perms[i] = weight_matching_permutation(layer.experts[anchor], layer.experts[i]).perm
    return MergePlan(clustering=clustering, anchors=tuple(anchors), permutations=tuple(perms),
                     weights=weights, ratio=ratio)


def apply_merge_plan(layer: MoeLayer, plan: MergePlan) -> MergedLayer:
    if plan.clustering.num_experts != layer.num_experts:
        raise DomainError("plan and layer disagree on the expert count")
    merged = []
    for members, anchor in zip(plan.clustering.clusters, plan.anchors):
        if len(members) == 1:
            merged.append(layer.experts[members[0]])
            continue
        aligned = [layer.experts[i] if i == anchor else apply_permutation(layer.experts[i], plan.permutations[i])
                   for i in members]
        merged.append(_average(aligned, [plan.weights[i] for i in members]))
    return MergedLayer(router=layer.router, experts=tuple(merged),
                       shared_experts=layer.shared_experts, index_map=plan.index_map)


def singleton_fraction(clustering: Clustering) -> float:
    sizes = [len(c) for c in clustering.clusters]
    return sum(1 for s in sizes if s == 1) / len(sizes)
