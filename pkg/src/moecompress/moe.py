"""Sparse MoE layer: SwiGLU experts, top-k softmax router, forward pass.

Every forward entry point accepts a single token ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import as_f64, softmax

GateMode = Literal["zeroed", "renormalized"]
GATE_MODES = ("zeroed", "renormalized")


def silu(t: np.ndarray) -> np.ndarray:
    # t * sigmoid(t), written to avoid overflow in exp for large |t|
    return t * (0.5 * (1.0 + np.tanh(0.5 * t)))


@dataclass(frozen=True)
class ExpertWeights:
    w_up: np.ndarray  # (d_ff, d)
    w_gate: np.ndarray  # (d_ff, d)
    w_down: np.ndarray  # (d, d_ff)

    def __post_init__(self):
        for name in ("w_up", "w_gate", "w_down"):
            object.__setattr__(self, name, as_f64(getattr(self, name)))
        d_ff, d = self.w_up.shape
        if self.w_gate.shape != (d_ff, d) or self.w_down.shape != (d, d_ff):
            raise DimensionError(
                f"inconsistent expert shapes up={self.w_up.shape} "
                f"gate={self.w_gate.shape} down={self.w_down.shape}"
            )

    @property
    def d(self) -> int:
        return self.w_up.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_up.shape[0]

    def matrices(self) -> dict[str, np.ndarray]:
        return {"w_up": self.w_up, "w_gate": self.w_gate, "w_down": self.w_down}


def expert_forward(e: ExpertWeights, x) -> np.ndarray:
    x = as_f64(x)
    if x.shape[-1] != e.d:
        raise DimensionError(f"token has length {x.shape[-1]}, expert expects {e.d}")
    hidden = silu(x @ e.w_gate.T) * (x @ e.w_up.T)
    return hidden @ e.w_down.T


@dataclass(frozen=True)
class RouterConfig:
    weight: np.ndarray  # (K, d)
    top_k: int
    gate_mode: GateMode = "renormalized"
    # Optional per-expert logit offset; zeros unless a synthetic model plants usage skew.
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_f64(self.weight)
        if w.ndim != 2 or w.shape[0] < 1:
            raise DimensionError(f"router weight must be K x d, got {w.shape}")
        object.__setattr__(self, "weight", w)
        b = np.zeros(w.shape[0]) if self.bias is None else as_f64(self.bias)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"router bias must have length {w.shape[0]}")
        object.__setattr__(self, "bias", b)
        if not 1 <= self.top_k <= w.shape[0]:
            raise ConfigError(f"top_k={self.top_k} outside 1..{w.shape[0]}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class GateResult:
    gates: np.ndarray  # (K,) or (n, K)
    active: np.ndarray  # (top_k,) or (n, top_k) expert indices, best first

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.gates.shape, dtype=bool)
        np.put_along_axis(m, self.active, True, axis=-1)
        return m


def gate_compute(router: RouterConfig, x) -> GateResult:
    """Top-k gating. Ties in gate value go to the lower expert index."""
    x = as_f64(x)
    if x.shape[-1] != router.d:
        raise DimensionError(f"token has length {x.shape[-1]}, router expects {router.d}")
    probs = softmax(x @ router.weight.T + router.bias)
    order = np.argsort(-probs, axis=-1, kind="stable")
    active = order[..., : router.top_k]
    gates = np.zeros_like(probs)
    kept = np.take_along_axis(probs, active, axis=-1)
    if router.gate_mode == "renormalized":
        kept = kept / kept.sum(axis=-1, keepdims=True)
    np.put_along_axis(gates, active, kept, axis=-1)
    return GateResult(gates=gates, active=active)


@dataclass(frozen=True)
class MoeLayer:
    router: RouterConfig
    experts: tuple[ExpertWeights, ...]
    shared_experts: tuple[ExpertWeights, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "shared_experts", tuple(self.shared_experts))
        if not self.experts:
            raise ConfigError("a layer needs at least one expert")
        if len(self.experts) != self.router.num_experts:
            raise DimensionError(
                f"{len(self.experts)} experts but router has {self.router.num_experts} rows"
            )
        shape = (self.experts[0].d, self.experts[0].d_ff)
        for e in self.experts + self.shared_experts:
            if (e.d, e.d_ff) != shape:
                raise DimensionError("all experts must share (d, d_ff)")
        if self.router.d != shape[0]:
            raise DimensionError("router and expert input dimensions differ")

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

    def expert_outputs(self, x) -> np.ndarray:
        """All routed experts on a batch: returns (K, n, d)."""
        xb = np.atleast_2d(as_f64(x))
        return np.stack([expert_forward(e, xb) for e in self.experts])

    def expert_output(self, k: int, x) -> np.ndarray:
        return expert_forward(self.experts[k], x)

    def shared_output(self, x) -> np.ndarray:
        x = as_f64(x)
        out = np.zeros(x.shape)
        for s in self.shared_experts:
            out = out + expert_forward(s, x)
        return out

    def routing(self, x) -> GateResult:
        return gate_compute(self.router, x)

    def forward(self, x):
        return layer_forward(self, x)


def combine(gates: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """sum_k gates[n, k] * outputs[k, n, :] in expert order."""
    y = np.zeros(outputs.shape[1:])
    for k in range(outputs.shape[0]):
        y += gates[:, k : k + 1] * outputs[k]
    return y


def layer_forward(layer: MoeLayer, x):
    """Returns ``(y, gate_result)``; single tokens give ``y`` of shape (d,)."""
    x = as_f64(x)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    g = gate_compute(layer.router, xb)
    y = combine(g.gates, layer.expert_outputs(xb)) + layer.shared_output(xb)
    if single:
        return y[0], GateResult(gates=g.gates[0], active=g.active[0])
    return y, g


@dataclass(frozen=True)
class SynthConfig:
    num_experts: int = 32
    d: int = 32
    d_ff: int = 64
    top_k: int = 4
    groups: int = 8
    noise: float = 1.0  # within-group weight noise, relative to the base scale
    router_skew: float = 2.0  # Zipf exponent of planted usage imbalance
    router_scale: float = 6.0  # sharpness of group-level routing
    router_noise: float = 0.5  # spread of router rows within a group
    scale_spread: float = 0.0  # log-normal spread of per-expert output scale
    shared_experts: int = 0
    gate_mode: GateMode = "renormalized"

    def validate(self) -> None:
        if self.num_experts < 1 or self.d < 1 or self.d_ff < 1:
            raise ConfigError("num_experts, d and d_ff must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError("top_k must lie in 1..num_experts")
        if not 1 <= self.groups <= self.num_experts:
            raise ConfigError("groups must lie in 1..num_experts")
        for name in ("noise", "router_skew", "router_scale", "router_noise", "scale_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.shared_experts < 0:
            raise ConfigError("shared_experts must be non-negative")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by integers (seed, purpose, ...)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def group_of(k: int, num_experts: int, groups: int) -> int:
    return k * groups // num_experts


def synth_model(cfg: SynthConfig, seed: int) -> MoeLayer:
    """Synthetic layer with planted expert groups and Zipf-skewed routing.

    Expert k copies base expert ``group_of(k)`` and adds Gaussian noise of
    relative size ``cfg.noise``. Router rows of one group share a direction so
    the group's experts are co-selected, and a per-expert bias
    ``-skew * log(1 + rank)`` over a random rank order makes usage imbalanced.
    """
    cfg.validate()
    rng = make_rng(seed, 0)
    K, d, d_ff, G = cfg.num_experts, cfg.d, cfg.d_ff, cfg.groups
    in_scale, out_scale = 1.0 / np.sqrt(d), 1.0 / np.sqrt(d_ff)

    def draw_expert(noise_rng, base=None, rel=1.0):
        up = noise_rng.standard_normal((d_ff, d)) * in_scale * rel
        gate = noise_rng.standard_normal((d_ff, d)) * in_scale * rel
        down = noise_rng.standard_normal((d, d_ff)) * out_scale * rel
        if base is None:
            return up, gate, down
        return base[0] + up, base[1] + gate, base[2] + down

    bases = [draw_expert(rng) for _ in range(G)]
    centroids = rng.standard_normal((G, d)) * in_scale
    experts = []
    rows = np.empty((K, d))
    log_scale = rng.standard_normal(K) * cfg.scale_spread
    for k in range(K):
        g = group_of(k, K, G)
        up, gate, down = draw_expert(rng, bases[g], cfg.noise)
        experts.append(ExpertWeights(up, gate, down * np.exp(log_scale[k])))
        rows[k] = cfg.router_scale * (centroids[g] + cfg.router_noise * rng.standard_normal(d) * in_scale)
    rank = rng.permutation(K)
    bias = -cfg.router_skew * np.log1p(rank)
    shared = [ExpertWeights(*draw_expert(rng)) for _ in range(cfg.shared_experts)]
    router = RouterConfig(weight=rows, top_k=cfg.top_k, gate_mode=cfg.gate_mode, bias=bias)
    return MoeLayer(router=router, experts=tuple(experts), shared_experts=tuple(shared))
