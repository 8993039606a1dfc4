"""Build a synthetic MoE layer, route some tokens and look at the per-expert
statistics that every compression method starts from."""

import numpy as np

from moecompress import SynthConfig, TokenStream, calibrate, compute_saliency, synth_model

layer = synth_model(SynthConfig(), seed=0)
print(f"{layer.num_experts} experts, top-{layer.top_k}, d={layer.d}, d_ff={layer.d_ff}")

stream = TokenStream(d=layer.d, count=2048, seed=0)
stats = calibrate(layer, stream)

# Usage is skewed on purpose: a few experts see most tokens.
order = np.argsort(-stats.nu)
print("most used:", order[:5].tolist(), stats.nu[order[:5]].tolist())
print("least used:", order[-5:].tolist(), stats.nu[order[-5:]].tolist())
assert stats.nu.sum() == stats.token_count * layer.top_k

for criterion in ("frequency", "ean", "reap"):
    scores = compute_saliency(stats, criterion).scores
    print(f"{criterion:>9}: lowest five {np.argsort(scores, kind='stable')[:5].tolist()}")
