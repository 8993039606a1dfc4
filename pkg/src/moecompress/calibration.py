"""Calibration: stream tokens through a layer and accumulate per-expert statistics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError
from .moe import make_rng
from .numerics import as_f64

SPLITS = {"calib": 1, "eval": 2}


@dataclass(frozen=True)
class TokenStream:
    """Either a seeded Gaussian generator or a token file.

    Calibration and held-out evaluation draw from disjoint Philox streams
    keyed by ``(seed, split)``.
    """

    d: int
    count: int
    seed: int = 0
    split: str = "calib"
    path: str | None = None

    @classmethod
    def from_file(cls, path) -> "TokenStream":
        from .io import read_tokens

        tokens = read_tokens(path)
        return cls(d=tokens.shape[1], count=tokens.shape[0], path=str(path))

    def array(self) -> np.ndarray:
        if self.path is not None:
            from .io import read_tokens

            return read_tokens(self.path)
        if self.split not in SPLITS:
            raise DomainError(f"unknown split {self.split!r}")
        rng = make_rng(self.seed, 1, SPLITS[self.split])
        return rng.standard_normal((self.count, self.d))

    def chunks(self, size: int = 1024):
        tokens = self.array()
        for start in range(0, tokens.shape[0], size):
            yield tokens[start : start + size]


def layer_fingerprint(layer) -> str:
    h = hashlib.sha256()
    for arr in layer_arrays(layer):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def layer_arrays(layer):
    yield layer.router.weight
    yield layer.router.bias
    for e in tuple(layer.experts) + tuple(layer.shared_experts):
        yield from (e.w_up, e.w_gate, e.w_down)
    index_map = getattr(layer, "index_map", None)
    if index_map is not None:
        yield np.asarray(index_map, dtype=np.float64)


@dataclass(frozen=True)
class CalibStats:
    num_experts: int
    d: int
    top_k: int
    gate_mode: str
    token_count: int
    nu: np.ndarray  # (K,) int64: tokens on which the expert is active
    sum_gate_norm: np.ndarray  # (K,) sum over active tokens of g * ||f||
    sum_norm: np.ndarray  # (K,) sum over active tokens of ||f||
    act_sum: np.ndarray | None  # (K, d) sum over all tokens of f; None when active-only
    act_active_sum: np.ndarray  # (K, d) sum over active tokens of f
    gate_trace: np.ndarray  # (K, token_count) applied gate values
    layer_id: str | None = None

    @classmethod
    def empty(cls, num_experts: int, d: int, top_k: int, gate_mode: str,
              layer_id: str | None = None, active_only: bool = False) -> "CalibStats":
        K = num_experts
        return cls(
            num_experts=K, d=d, top_k=top_k, gate_mode=gate_mode, token_count=0,
            nu=np.zeros(K, dtype=np.int64), sum_gate_norm=np.zeros(K), sum_norm=np.zeros(K),
            act_sum=None if active_only else np.zeros((K, d)),
            act_active_sum=np.zeros((K, d)), gate_trace=np.zeros((K, 0)), layer_id=layer_id,
        )

    @property
    def mean_act_active(self) -> np.ndarray:
        denom = np.maximum(self.nu, 1)[:, None]
        return np.where(self.nu[:, None] > 0, self.act_active_sum / denom, 0.0)


def _accumulate_chunk(layer, x: np.ndarray, active_only: bool):
    routing = layer.routing(x)
    gates, mask = routing.gates, routing.mask
    K, d = layer.num_experts, layer.d
    nu = mask.sum(axis=0).astype(np.int64)
    sum_gate_norm = np.zeros(K)
    sum_norm = np.zeros(K)
    act_active = np.zeros((K, d))
    act_all = None if active_only else np.zeros((K, d))
    for k in range(K):
        rows = np.flatnonzero(mask[:, k])
        if active_only:
            out = layer.expert_output(k, x[rows])
        else:
            full = layer.expert_output(k, x)
            act_all[k] = full.sum(axis=0)
            out = full[rows]
        norms = np.linalg.norm(out, axis=1)
        sum_norm[k] = norms.sum()
        sum_gate_norm[k] = (gates[rows, k] * norms).sum()
        act_active[k] = out.sum(axis=0)
    return nu, sum_gate_norm, sum_norm, act_all, act_active, gates.T.copy()


def calibrate(layer, stream, active_only: bool = False, chunk_size: int = 1024) -> CalibStats:
    """Run ``stream`` through ``layer`` and collect :class:`CalibStats`.

    Every expert is evaluated on every token (needed for representative
    vectors) unless ``active_only`` is set. ``stream`` is a TokenStream or an
    (n, d) array.
    """
    chunks = stream.chunks(chunk_size) if isinstance(stream, TokenStream) else _array_chunks(stream, chunk_size)
    stats = CalibStats.empty(layer.num_experts, layer.d, layer.top_k, layer.router.gate_mode,
                             layer_fingerprint(layer), active_only)
    for x in chunks:
        if x.shape[1] != layer.d:
            raise DimensionError(f"tokens have dimension {x.shape[1]}, layer expects {layer.d}")
        nu, sgn, sn, act_all, act_active, trace = _accumulate_chunk(layer, x, active_only)
        part = replace(stats, token_count=x.shape[0], nu=nu, sum_gate_norm=sgn, sum_norm=sn,
                       act_sum=act_all, act_active_sum=act_active, gate_trace=trace)
        stats = merge_stats(stats, part)
    if stats.token_count == 0:
        raise DomainError("calibration stream is empty")
    return stats


def _array_chunks(tokens, size):
    tokens = as_f64(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"token array must be (n, d), got {tokens.shape}")
    for start in range(0, tokens.shape[0], size):
        yield tokens[start : start + size]


def merge_stats(a: CalibStats, b: CalibStats) -> CalibStats:
    """Combine two partial statistics; gate traces concatenate as ``a`` then ``b``."""
    if (a.num_experts, a.d) != (b.num_experts, b.d):
        raise DomainError("cannot merge statistics of layers with different K or d")
    if a.layer_id and b.layer_id and a.layer_id != b.layer_id:
        raise DomainError("statistics come from different layers")
    if (a.top_k, a.gate_mode) != (b.top_k, b.gate_mode):
        raise DomainError("statistics use different routing settings")
    if a.token_count == 0:
        return b
    if b.token_count == 0:
        return a
    act_sum = None if a.act_sum is None or b.act_sum is None else a.act_sum + b.act_sum
    return replace(
        a,
        token_count=a.token_count + b.token_count,
        nu=a.nu + b.nu,
        sum_gate_norm=a.sum_gate_norm + b.sum_gate_norm,
        sum_norm=a.sum_norm + b.sum_norm,
        act_sum=act_sum,
        act_active_sum=a.act_active_sum + b.act_active_sum,
        gate_trace=np.concatenate([a.gate_trace, b.gate_trace], axis=1),
        layer_id=a.layer_id or b.layer_id,
    )


def representative_vectors(stats: CalibStats) -> np.ndarray:
    """Mean activation of every expert over all calibration tokens, (K, d)."""
    if stats.token_count == 0:
        raise DomainError("no tokens accumulated")
    if stats.act_sum is None:
        raise DomainError("statistics were collected active-only; representative vectors unavailable")
    return stats.act_sum / stats.token_count


def select_experts(stats: CalibStats, indices) -> CalibStats:
    """Statistics restricted to ``indices``, measured under the original routing."""
    idx = np.asarray(indices, dtype=np.int64)
    return replace(
        stats,
        num_experts=len(idx),
        nu=stats.nu[idx],
        sum_gate_norm=stats.sum_gate_norm[idx],
        sum_norm=stats.sum_norm[idx],
        act_sum=None if stats.act_sum is None else stats.act_sum[idx],
        act_active_sum=stats.act_active_sum[idx],
        gate_trace=stats.gate_trace[idx],
    )


def save_stats(stats: CalibStats, path) -> None:
    from .io import write_container

    tensors = {
        "nu": stats.nu.astype(np.float64),
        "sum_gate_norm": stats.sum_gate_norm,
        "sum_norm": stats.sum_norm,
        "act_active_sum": stats.act_active_sum,
        "gate_trace": stats.gate_trace,
    }
    if stats.act_sum is not None:
        tensors["act_sum"] = stats.act_sum
    meta = {
        "kind": "calib_stats", "num_experts": stats.num_experts, "d": stats.d,
        "top_k": stats.top_k, "gate_mode": stats.gate_mode,
        "token_count": stats.token_count, "layer_id": stats.layer_id,
    }
    write_container(Path(path), tensors, meta, dtype="f64")


def load_stats(path) -> CalibStats:
    from .errors import ManifestError
    from .io import read_container

    tensors, meta = read_container(Path(path))
    if meta.get("kind") != "calib_stats":
        raise ManifestError(f"{path} does not hold calibration statistics")
    return CalibStats(
        num_experts=int(meta["num_experts"]), d=int(meta["d"]), top_k=int(meta["top_k"]),
        gate_mode=meta["gate_mode"], token_count=int(meta["token_count"]),
        nu=tensors["nu"].astype(np.int64), sum_gate_norm=tensors["sum_gate_norm"],
        sum_norm=tensors["sum_norm"], act_sum=tensors.get("act_sum"),
        act_active_sum=tensors["act_active_sum"], gate_trace=tensors["gate_trace"],
        layer_id=meta.get("layer_id"),
    )
