"""Diagnostics: functional-subspace PCA, expert distances and singular-vector
alignment, n-gram diversity and Jensen-Shannon divergence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibStats
from .errors import DimensionError, DomainError
from .merge import weight_matching_permutation, apply_permutation
from .moe import ExpertWeights
from .numerics import as_f64, pca, svd

COLLAPSE_CAP = 1e6
VARIANTS = ("original", "pruned", "merged")


@dataclass(frozen=True)
class SubspaceReport:
    projected: dict  # variant -> (n, 2)
    total_variance: dict  # variant -> float
    axis_range: dict  # variant -> (range_pc1, range_pc2)
    collapse_ratio: float
    explained_variance: tuple[float, float]

    def to_json(self) -> dict:
        return {
            "total_variance": self.total_variance,
            "axis_range": {k: list(v) for k, v in self.axis_range.items()},
            "collapse_ratio": self.collapse_ratio,
            "explained_variance": list(self.explained_variance),
            "counts": {k: len(v) for k, v in self.projected.items()},
        }

    def csv_rows(self):
        yield "variant,expert_id,pc1,pc2"
        for variant, pts in self.projected.items():
            for i, (a, b) in enumerate(pts):
                yield f"{variant},{i},{a:.17g},{b:.17g}"


def functional_subspace(stats_original: CalibStats, stats_pruned: CalibStats,
                        stats_merged: CalibStats) -> SubspaceReport:
    """Project per-expert mean activations of three variants onto the top-2
    principal axes of the original layer's experts.

    Points are projected one row at a time so an expert present in two
    variants gets bit-identical coordinates.
    """
    orig = stats_original.mean_act_active
    if orig.shape[0] < 3:
        raise DomainError("need at least three experts for a 2-D subspace")
    basis = pca(orig, 2)
    projected, total_var, ranges = {}, {}, {}
    for name, stats in zip(VARIANTS, (stats_original, stats_pruned, stats_merged)):
        pts = stats.mean_act_active
        if pts.shape[1] != orig.shape[1]:
            raise DimensionError(f"{name} activations have dimension {pts.shape[1]}")
        proj = np.array([(p - basis.mean) @ basis.components.T for p in pts]).reshape(-1, 2)
        projected[name] = proj
        total_var[name] = float(np.sum(np.var(proj, axis=0)))
        ranges[name] = tuple(float(v) for v in np.ptp(proj, axis=0))
    merged_var = total_var["merged"]
    ratio = COLLAPSE_CAP if merged_var == 0 else min(total_var["original"] / merged_var, COLLAPSE_CAP)
    return SubspaceReport(projected=projected, total_variance=total_var, axis_range=ranges,
                          collapse_ratio=float(ratio),
                          explained_variance=tuple(float(v) for v in basis.explained_variance))


def relative_l2(a: ExpertWeights, b: ExpertWeights) -> float:
    """Mean over the three projections of ||W_a - W_b||_F / ||W_a||_F.

    Asymmetric: the first expert's norm is the reference.
    """
    vals = []
    for name, wa in a.matrices().items():
        ref = np.linalg.norm(wa)
        if ref == 0:
            raise DomainError(f"reference expert has a zero {name}")
        vals.append(np.linalg.norm(wa - getattr(b, name)) / ref)
    return float(np.mean(vals))


def expert_distance(layer, i: int, j: int) -> float:
    return relative_l2(layer.experts[i], layer.experts[j])


@dataclass(frozen=True)
class AlignmentReport:
    rel_l2: float
    sv_alignment: float
    degenerate: bool = False
    per_matrix: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rel_l2": self.rel_l2, "sv_alignment": self.sv_alignment,
                "degenerate": self.degenerate, "per_matrix": self.per_matrix}


def _near_repeated(s: np.ndarray, r: int) -> bool:
    top = s[: r + 1]
    gaps = np.abs(np.diff(top))
    return bool(np.any(gaps <= 1e-8 * max(float(top[0]), 1e-300)))


def alignment_report(a: ExpertWeights, b: ExpertWeights, r: int, permute_first: bool = False) -> AlignmentReport:
    """Relative distance plus singular-vector alignment.

    Alignment is the mean over the three weight matrices and the top ``r``
    ranks of |<u_k, u'_k>| * |<v_k, v'_k>|. Near-repeated singular values make
    the index pairing arbitrary; they are flagged via ``degenerate``.
    """
    if not 1 <= r <= min(a.d_ff, a.d):
        raise DomainError(f"rank {r} outside 1..{min(a.d_ff, a.d)}")
    if permute_first:
        b = apply_permutation(b, weight_matching_permutation(a, b))
    per_matrix = {}
    degenerate = False
    for name, wa in a.matrices().items():
        sa, sb = svd(wa), svd(getattr(b, name))
        degenerate |= _near_repeated(sa.s, r) or _near_repeated(sb.s, r)
        u = np.abs(np.sum(sa.u[:, :r] * sb.u[:, :r], axis=0))
        v = np.abs(np.sum(sa.vt[:r] * sb.vt[:r], axis=1))
        per_matrix[name] = float(np.mean(u * v))
    return AlignmentReport(rel_l2=relative_l2(a, b), sv_alignment=float(np.mean(list(per_matrix.values()))),
                           degenerate=degenerate, per_matrix=per_matrix)


def sv_alignment(a: ExpertWeights, b: ExpertWeights, r: int, permute_first: bool = False) -> float:
    return alignment_report(a, b, r, permute_first).sv_alignment


def ngram_diversity(tokens, n: int) -> float:
    """Distinct n-grams over n-gram positions. Strings are split on whitespace."""
    seq = tokens.split() if isinstance(tokens, str) else list(tokens)
    if n < 1 or len(seq) < n:
        raise DomainError(f"sequence of length {len(seq)} has no {n}-grams")
    grams = [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]
    return len(set(grams)) / len(grams)


def _as_distributions(p, q):
    p, q = as_f64(p), as_f64(q)
    if p.shape != q.shape or p.shape[-1] == 0:
        raise DomainError(f"distributions over different supports: {p.shape} vs {q.shape}")
    for v in (p, q):
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-9):
            raise DomainError("inputs must be probability vectors")
    return p / p.sum(axis=-1, keepdims=True), q / q.sum(axis=-1, keepdims=True)


def _kl2(p, m):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p / m), 0.0)
    return terms.sum(axis=-1)


def jsd(p, q):
    """Base-2 Jensen-Shannon divergence in [0, 1]; rows are treated as
    separate distributions when given 2-D input."""
    p, q = _as_distributions(p, q)
    m = 0.5 * (p + q)
    out = np.clip(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out
