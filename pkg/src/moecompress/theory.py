"""Monte-Carlo checks of the merging/pruning error theory.

A :class:`MixScenario` describes one pair of experts (i, j) through the summed
gate ``s = g_i + g_j``, the mixing ratio ``r = g_i / s`` and the expert gap
``delta = f_i - f_j``. All randomness comes from a Philox stream keyed by the
scenario seed, so estimates at a given seed are reproducible bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import DomainError
from .moe import make_rng

RSampler = Callable[[np.random.Generator, int], np.ndarray]
SSampler = Callable[[np.random.Generator, np.ndarray], np.ndarray]

GRID = np.round(np.arange(101) * 0.01, 2)


@dataclass(frozen=True)
class MixScenario:
    """``s_sampler`` receives the drawn ``r`` and may ignore it (s independent
    of r, the setting of the closed form) or depend on it."""

    r_sampler: RSampler
    s_sampler: SSampler
    delta: np.ndarray | Callable[[np.random.Generator, int], np.ndarray]
    n_samples: int
    seed: int = 0
    name: str = "custom"

    def draw(self):
        if self.n_samples <= 0:
            raise DomainError("a scenario needs at least one sample")
        rng = make_rng(self.seed, 3)
        r = np.asarray(self.r_sampler(rng, self.n_samples), dtype=np.float64)
        if np.any((r < 0) | (r > 1)):
            raise DomainError("mixing ratio must lie in [0, 1]")
        s = np.asarray(self.s_sampler(rng, r), dtype=np.float64)
        if callable(self.delta):
            gap_sq = np.sum(np.asarray(self.delta(rng, self.n_samples)) ** 2, axis=-1)
        else:
            gap_sq = np.full(self.n_samples, float(np.sum(np.asarray(self.delta, dtype=np.float64) ** 2)))
        return s, r, gap_sq


@dataclass(frozen=True)
class AlphaResult:
    alpha_star: float
    min_error: float
    grid_alpha: float
    grid_min_error: float
    grid_consistent: bool


@dataclass(frozen=True)
class TheoryReport:
    scenario: str
    n_samples: int
    seed: int
    empirical_min_error: float
    predicted_error: float
    alpha_star_empirical: float
    alpha_star_predicted: float
    grid_min_error: float
    relative_gap: float
    prune_error: float
    mean_s2: float
    var_r: float
    mean_gj2: float
    grid_consistent: bool

    def to_json(self) -> dict:
        return asdict(self)


def merge_error_mc(sc: MixScenario, alpha: float) -> float:
    """Estimate of E[s^2 (r - alpha)^2 ||delta||^2]."""
    if not 0 <= alpha <= 1:
        raise DomainError("alpha must lie in [0, 1]")
    s, r, gap_sq = sc.draw()
    return float(np.mean(s**2 * (r - alpha) ** 2 * gap_sq))


def _grid_errors(s, r, gap_sq):
    w = s**2 * gap_sq
    return np.array([np.mean(w * (r - a) ** 2) for a in GRID])


def optimal_alpha(sc: MixScenario) -> AlphaResult:
    """alpha* = mean of r, with a grid scan over [0, 1] in steps of 0.01.

    ``grid_consistent`` is False when some grid alpha beats alpha* by more
    than three standard errors of the paired difference, which happens when
    ``s`` depends on ``r``.
    """
    s, r, gap_sq = sc.draw()
    alpha_star = float(np.mean(r))
    w = s**2 * gap_sq
    terms_star = w * (r - alpha_star) ** 2
    min_error = float(np.mean(terms_star))
    errs = _grid_errors(s, r, gap_sq)
    best = int(np.argmin(errs))
    diff = w * (r - GRID[best]) ** 2 - terms_star
    noise = 3.0 * float(np.std(diff)) / np.sqrt(len(diff))
    return AlphaResult(
        alpha_star=alpha_star, min_error=min_error, grid_alpha=float(GRID[best]),
        grid_min_error=float(errs[best]), grid_consistent=bool(errs[best] >= min_error - noise),
    )


def prune_error_mc(sc: MixScenario) -> float:
    """Estimate of E[g_j^2 ||delta||^2] with g_j = (1 - r) s: drop j and hand
    its gate to i."""
    s, r, gap_sq = sc.draw()
    return float(np.mean(((1.0 - r) * s) ** 2 * gap_sq))


def theory_report(sc: MixScenario) -> TheoryReport:
    s, r, gap_sq = sc.draw()
    opt = optimal_alpha(sc)
    mean_s2 = float(np.mean(s**2))
    var_r = float(np.var(r))
    predicted = mean_s2 * var_r * float(np.mean(gap_sq))
    return TheoryReport(
        scenario=sc.name, n_samples=sc.n_samples, seed=sc.seed,
        empirical_min_error=opt.min_error, predicted_error=predicted,
        alpha_star_empirical=opt.grid_alpha, alpha_star_predicted=opt.alpha_star,
        grid_min_error=opt.grid_min_error,
        relative_gap=abs(opt.min_error - predicted) / predicted if predicted > 0 else 0.0,
        prune_error=prune_error_mc(sc), mean_s2=mean_s2, var_r=var_r,
        mean_gj2=float(np.mean(((1.0 - r) * s) ** 2)), grid_consistent=opt.grid_consistent,
    )


def constant(value: float):
    return lambda rng, arg: np.full(len(arg) if hasattr(arg, "__len__") else arg, float(value))


def canonical_scenario(n_samples: int = 1_000_000, seed: int = 0) -> MixScenario:
    """s = 1, r ~ Uniform(0, 1), unit gap: the minimal merge error is 1/12."""
    return MixScenario(
        r_sampler=lambda rng, n: rng.random(n),
        s_sampler=lambda rng, r: np.ones_like(r),
        delta=np.array([1.0]), n_samples=n_samples, seed=seed, name="canonical",
    )


def synthesis_scenario(n_samples: int = 1_000_000, seed: int = 0) -> MixScenario:
    """Router that strongly mixes i and j while expert j only ever gets a small gate.

    Half of the tokens prefer i (r near 1, summed gate near 1); the rest
    prefer j but with a summed gate of about 0.1.
    """

    def r_sampler(rng, n):
        prefer_i = rng.random(n) < 0.5
        return np.where(prefer_i, rng.beta(20.0, 1.0, n), rng.beta(1.0, 20.0, n))

    def s_sampler(rng, r):
        return np.where(r >= 0.5, rng.uniform(0.8, 1.0, len(r)), rng.uniform(0.05, 0.1, len(r)))

    return MixScenario(r_sampler=r_sampler, s_sampler=s_sampler, delta=np.array([1.0]),
                       n_samples=n_samples, seed=seed, name="synthesis")


@dataclass(frozen=True)
class HierarchicalResult:
    factored_error: float
    direct_min_error: float
    direct_alpha: tuple[float, ...]
    relative_gap: float
    skipped: int
    n_used: int

    def to_json(self) -> dict:
        return asdict(self)


def simplex_grid(k: int, step: float = 0.05) -> np.ndarray:
    m = int(round(1.0 / step))
    pts = [c + (m - sum(c),) for c in itertools.product(range(m + 1), repeat=k - 1) if sum(c) <= m]
    return np.array(pts, dtype=np.float64) / m


def hierarchical_error_mc(gate_sampler, experts, n_samples: int, seed: int = 0,
                          x_sampler=None, grid_step: float = 0.05) -> HierarchicalResult:
    """Cluster error of replacing ``experts`` by one static mixture.

    ``gate_sampler(rng, x) -> (n, k)`` gives member gates, ``experts`` are
    callables ``f(x) -> (n, d)``. The factored value is
    E[(sum g)^2] * E||sum_j (w_j - E w_j) f_j||^2 with w = g / sum g; the direct
    value is the minimum over a simplex grid of fixed weights alpha of
    E||sum_j g_j f_j - (sum g) sum_j alpha_j f_j||^2. Samples whose gates are
    all zero are skipped and counted.
    """
    if not experts:
        raise DomainError("a cluster needs at least one member")
    if n_samples <= 0:
        raise DomainError("n_samples must be positive")
    rng = make_rng(seed, 4)
    x = rng.standard_normal((n_samples, 1)) if x_sampler is None else x_sampler(rng, n_samples)
    g = np.asarray(gate_sampler(rng, x), dtype=np.float64).reshape(n_samples, len(experts))
    total = g.sum(axis=1)
    keep = total > 0
    skipped = int(np.count_nonzero(~keep))
    g, total, x = g[keep], total[keep], x[keep]
    F = np.stack([np.asarray(f(x), dtype=np.float64).reshape(len(x), -1) for f in experts])  # (k, n, d)
    w = g / total[:, None]
    centred = w - w.mean(axis=0)
    dyn = np.einsum("nk,knd->nd", centred, F)
    factored = float(np.mean(total**2) * np.mean(np.sum(dyn**2, axis=1)))

    target = np.einsum("nk,knd->nd", g, F)
    best_err, best_alpha = np.inf, None
    for alpha in simplex_grid(len(experts), grid_step):
        static = np.einsum("k,knd->nd", alpha, F)
        err = float(np.mean(np.sum((target - total[:, None] * static) ** 2, axis=1)))
        if err < best_err:
            best_err, best_alpha = err, alpha
    scale = max(factored, best_err)
    gap = abs(factored - best_err) / scale if scale > 0 else 0.0
    return HierarchicalResult(
        factored_error=factored, direct_min_error=best_err,
        direct_alpha=tuple(float(a) for a in best_alpha), relative_gap=gap,
        skipped=skipped, n_used=int(keep.sum()),
    )


def dirichlet_cluster(concentration, n_samples: int = 200_000, seed: int = 0) -> HierarchicalResult:
    """Members are orthogonal constant experts e_1..e_k; their gates are the
    first k coordinates of a Dirichlet draw whose last coordinate stands for
    the rest of the layer."""
    conc = np.asarray(concentration, dtype=np.float64)
    k = len(conc) - 1
    experts = [(lambda x, j=j: np.tile(np.eye(k)[j], (len(x), 1))) for j in range(k)]
    return hierarchical_error_mc(lambda rng, x: rng.dirichlet(conc, len(x))[:, :k], experts,
                                 n_samples, seed)
