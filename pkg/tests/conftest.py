import numpy as np
import pytest

from moecompress.moe import ExpertWeights, MoeLayer, RouterConfig


def random_expert(rng, d, d_ff, scale=1.0):
    return ExpertWeights(
        rng.standard_normal((d_ff, d)) * scale / np.sqrt(d),
        rng.standard_normal((d_ff, d)) * scale / np.sqrt(d),
        rng.standard_normal((d, d_ff)) * scale / np.sqrt(d_ff),
    )


def random_layer(seed=0, K=8, d=6, d_ff=10, top_k=2, gate_mode="renormalized", shared=0, router_scale=1.0):
    rng = np.random.default_rng(seed)
    router = RouterConfig(weight=rng.standard_normal((K, d)) * router_scale, top_k=top_k, gate_mode=gate_mode)
    experts = tuple(random_expert(rng, d, d_ff) for _ in range(K))
    shared_experts = tuple(random_expert(rng, d, d_ff) for _ in range(shared))
    return MoeLayer(router=router, experts=experts, shared_experts=shared_experts)


def tokens(seed, n, d):
    return np.random.default_rng(1000 + seed).standard_normal((n, d))


@pytest.fixture
def layer():
    return random_layer()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
