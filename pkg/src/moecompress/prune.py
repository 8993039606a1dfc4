"""Expert pruning: saliency criteria, selection and removal."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibStats
from .errors import ConfigError, DomainError
from .moe import MoeLayer, RouterConfig

CRITERIA = ("frequency", "ean", "reap")


@dataclass(frozen=True)
class SaliencyScores:
    criterion: str
    scores: np.ndarray


@dataclass(frozen=True)
class PrunePlan:
    keep: tuple[int, ...]
    removed: tuple[int, ...]
    ratio: float
    criterion: str | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        keep, removed = tuple(sorted(int(i) for i in self.keep)), tuple(sorted(int(i) for i in self.removed))
        object.__setattr__(self, "keep", keep)
        object.__setattr__(self, "removed", removed)
        if not keep:
            raise DomainError("a prune plan must keep at least one expert")
        if set(keep) & set(removed):
            raise DomainError("keep and removed sets overlap")

    @property
    def num_experts(self) -> int:
        return len(self.keep) + len(self.removed)

    def to_json(self) -> dict:
        return {
            "type": "prune", "keep": list(self.keep), "removed": list(self.removed),
            "criterion": self.criterion, "ratio": self.ratio, "seed": self.seed, **self.extra,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrunePlan":
        if obj.get("type") != "prune":
            raise ConfigError("not a prune plan")
        return cls(keep=tuple(obj["keep"]), removed=tuple(obj["removed"]), ratio=obj["ratio"],
                   criterion=obj.get("criterion"), seed=obj.get("seed"))


def compute_saliency(stats: CalibStats, criterion: str) -> SaliencyScores:
    """Per-expert saliency.

    frequency: active-token count. ean: summed activation norm over active
    tokens. reap: mean of gate * activation norm over active tokens (0 for
    experts that are never selected).
    """
    if criterion == "frequency":
        scores = stats.nu.astype(np.float64)
    elif criterion == "ean":
        scores = stats.sum_norm.copy()
    elif criterion == "reap":
        scores = np.where(stats.nu > 0, stats.sum_gate_norm / np.maximum(stats.nu, 1), 0.0)
    else:
        raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    return SaliencyScores(criterion=criterion, scores=scores)


def num_removed(num_experts: int, ratio: float) -> int:
    return int(math.floor(num_experts * ratio + 1e-12))


def _check_ratio(num_experts: int, ratio: float) -> None:
    if not 0 < ratio < 1 or math.ceil(num_experts * ratio - 1e-12) >= num_experts:
        raise ConfigError(f"compression ratio {ratio} is infeasible for {num_experts} experts")


def select_prune_set(scores: SaliencyScores, ratio: float, per_layer: bool = True) -> PrunePlan:
    """Remove the floor(K * ratio) lowest-scoring experts.

    Equal scores remove the higher index first. ``per_layer`` is accepted for
    interface symmetry; a single layer has no global ranking to do, see
    :func:`select_prune_sets_global` for the multi-layer variant.
    """
    s = np.asarray(scores.scores, dtype=np.float64)
    K = s.size
    _check_ratio(K, ratio)
    n = num_removed(K, ratio)
    order = sorted(range(K), key=lambda i: (s[i], -i))
    removed = order[:n]
    keep = [i for i in range(K) if i not in set(removed)]
    return PrunePlan(keep=tuple(keep), removed=tuple(removed), ratio=ratio, criterion=scores.criterion)


def select_prune_sets_global(layer_scores: list[SaliencyScores], ratio: float) -> list[PrunePlan]:
    """Rank all experts of all layers together; every layer keeps at least one."""
    total = sum(len(s.scores) for s in layer_scores)
    _check_ratio(total, ratio)
    budget = num_removed(total, ratio)
    pool = sorted(
        ((float(s.scores[i]), -i, li) for li, s in enumerate(layer_scores) for i in range(len(s.scores))),
    )
    removed = [set() for _ in layer_scores]
    for score, neg_i, li in pool:
        if budget == 0:
            break
        if len(removed[li]) + 1 < len(layer_scores[li].scores):
            removed[li].add(-neg_i)
            budget -= 1
    plans = []
    for li, s in enumerate(layer_scores):
        keep = [i for i in range(len(s.scores)) if i not in removed[li]]
        plans.append(PrunePlan(keep=tuple(keep), removed=tuple(removed[li]), ratio=ratio,
                               criterion=s.criterion))
    return plans


def apply_prune(layer: MoeLayer, plan: PrunePlan) -> MoeLayer:
    """Drop removed experts and their router rows.

    The softmax over the surviving logits re-normalises the router, so the
    surviving gates are the original probabilities restricted and rescaled.
    """
    if plan.num_experts != layer.num_experts or max(plan.keep + plan.removed) >= layer.num_experts:
        raise DomainError(f"plan covers {plan.num_experts} experts, layer has {layer.num_experts}")
    keep = list(plan.keep)
    router = RouterConfig(
        weight=layer.router.weight[keep],
        bias=layer.router.bias[keep],
        top_k=min(layer.top_k, len(keep)),
        gate_mode=layer.router.gate_mode,
    )
    return MoeLayer(router=router, experts=tuple(layer.experts[i] for i in keep),
                    shared_experts=layer.shared_experts)


def prune_error_estimate(stats: CalibStats, j: int) -> float:
    """Calibration mean of ||g_j f_j||, the small-gate approximation of the
    output change caused by removing expert ``j``."""
    if stats.token_count == 0:
        return 0.0
    return float(stats.sum_gate_norm[j] / stats.token_count)
