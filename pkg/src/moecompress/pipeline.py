"""End-to-end compression and evaluation on a single layer."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import functional_subspace, jsd
from .calibration import CalibStats, TokenStream, calibrate, select_experts
from .errors import ConfigError, DimensionError
from .merge import (MergedLayer, MergePlan, apply_merge_plan, build_merge_plan, cluster_hcsmoe,
                    cluster_msmoe, singleton_fraction)
from .moe import MoeLayer
from .prune import CRITERIA, PrunePlan, apply_prune, compute_saliency, select_prune_set

METHODS = CRITERIA + ("msmoe", "hcsmoe")


def compress(layer: MoeLayer, stats: CalibStats, method: str, ratio: float,
             max_cluster_size: int | None = None, metric: str = "cosine", seed: int | None = None):
    """Returns ``(compressed_layer, plan)``; the plan is a PrunePlan or MergePlan."""
    if stats.num_experts != layer.num_experts:
        raise ConfigError(f"statistics cover {stats.num_experts} experts, layer has {layer.num_experts}")
    if method in CRITERIA:
        plan = select_prune_set(compute_saliency(stats, method), ratio)
        plan = PrunePlan(keep=plan.keep, removed=plan.removed, ratio=ratio, criterion=method, seed=seed)
        return apply_prune(layer, plan), plan
    if method == "msmoe":
        clustering = cluster_msmoe(stats, ratio)
    elif method == "hcsmoe":
        clustering = cluster_hcsmoe(stats, ratio, max_cluster_size, metric)
    else:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    plan = build_merge_plan(layer, clustering, stats.nu, ratio)
    plan = MergePlan(clustering=plan.clustering, anchors=plan.anchors, permutations=plan.permutations,
                     weights=plan.weights, ratio=ratio, extra={"seed": seed})
    return apply_merge_plan(layer, plan), plan


def plan_from_json(obj: dict):
    return PrunePlan.from_json(obj) if obj.get("type") == "prune" else MergePlan.from_json(obj)


def replay(layer: MoeLayer, plan_json: dict):
    """Rebuild a compressed layer from the original and a plan JSON object."""
    plan = plan_from_json(plan_json)
    return apply_prune(layer, plan) if isinstance(plan, PrunePlan) else apply_merge_plan(layer, plan)


def _gate_distributions(original: MoeLayer, compressed, tokens: np.ndarray, keep=None):
    """Per-token gate distributions of both layers in a shared index space,
    plus their top-1 choices."""
    g = original.routing(tokens).gates
    if isinstance(compressed, MergedLayer):
        p = np.zeros((g.shape[0], compressed.num_experts))
        for k, c in enumerate(compressed.index_map):
            p[:, c] += g[:, k]
        q = compressed.routing(tokens).gates
        top_p = compressed.index_map[np.argmax(g, axis=1)]
        top_q = np.argmax(q, axis=1)
    else:
        if keep is None:
            if compressed.num_experts != original.num_experts:
                raise ConfigError("pruned layer given without its kept-expert indices")
            keep = np.arange(original.num_experts)
        keep = np.asarray(keep, dtype=np.int64)
        p = g
        q = np.zeros_like(g)
        q[:, keep] = compressed.routing(tokens).gates
        top_p = np.argmax(g, axis=1)
        top_q = keep[np.argmax(compressed.routing(tokens).gates, axis=1)]
    p = p / p.sum(axis=1, keepdims=True)
    q = q / q.sum(axis=1, keepdims=True)
    return p, q, top_p, top_q


def run_eval(original: MoeLayer, compressed, stream, keep=None) -> dict:
    """Mean relative output error E||h - h'|| / E||h||, mean gate JSD and top-1
    agreement over the held-out ``stream`` (TokenStream or (n, d) array)."""
    tokens = stream.array() if isinstance(stream, TokenStream) else np.asarray(stream, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != original.d or compressed.d != original.d:
        raise DimensionError("token, original and compressed dimensions disagree")
    h, _ = original.forward(tokens)
    h2, _ = compressed.forward(tokens)
    p, q, top_p, top_q = _gate_distributions(original, compressed, tokens, keep)
    return {
        "rel_error": float(np.mean(np.linalg.norm(h - h2, axis=1)) / np.mean(np.linalg.norm(h, axis=1))),
        "gate_jsd": float(np.mean(jsd(p, q))),
        "top1_agreement": float(np.mean(top_p == top_q)),
        "tokens": int(tokens.shape[0]),
    }


@dataclass
class EvalReport:
    entries: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"entries": self.entries}

    def error(self, method: str, ratio: float) -> float:
        for e in self.entries:
            if e["method"] == method and e["ratio"] == ratio:
                return e["rel_error"]
        raise KeyError((method, ratio))


def compare_methods(layer: MoeLayer, calib, held_out, methods=METHODS, ratios=(0.25, 0.5),
                    max_cluster_size: int | None = None, timing: bool = False) -> EvalReport:
    """Calibrate once, then compress with every method and ratio and evaluate
    on ``held_out``."""
    stats = calib if isinstance(calib, CalibStats) else calibrate(layer, calib)
    report = EvalReport()
    for ratio in ratios:
        for method in methods:
            start = time.perf_counter()
            compressed, plan = compress(layer, stats, method, ratio, max_cluster_size)
            keep = plan.keep if isinstance(plan, PrunePlan) else None
            entry = {"method": method, "ratio": ratio, "experts": compressed.num_experts,
                     **run_eval(layer, compressed, held_out, keep)}
            if isinstance(plan, MergePlan):
                entry["singleton_fraction"] = singleton_fraction(plan.clustering)
            if timing:
                entry["runtime_s"] = time.perf_counter() - start
            report.entries.append(entry)
    return report


def subspace_experiment(layer: MoeLayer, tokens, ratio: float = 0.5, prune_criterion: str = "reap",
                        merge_method: str = "hcsmoe"):
    """Functional-subspace comparison of original, pruned and merged variants.

    Every variant's points are mean activations over the tokens the original
    router sends to the expert (or, for a merged expert, to any member). The
    merged layer keeps the original router, so this is its own routing; for
    the pruned layer it means survivors keep their original statistics.
    """
    stats = calibrate(layer, tokens)
    _, prune_plan = compress(layer, stats, prune_criterion, ratio)
    merged, _ = compress(layer, stats, merge_method, ratio)
    merged_stats = calibrate(merged, tokens)
    return functional_subspace(stats, select_experts(stats, prune_plan.keep), merged_stats)
