"""Experts of one group look far apart until their hidden units are aligned."""

import numpy as np

from moecompress import (SynthConfig, alignment_report, apply_permutation, expert_forward, synth_model,
                         weight_matching_permutation)

layer = synth_model(SynthConfig(noise=0.3), seed=0)
a, b = layer.experts[0], layer.experts[1]

# Shuffle b's hidden units: same function, very different weight matrices.
shuffled = apply_permutation(b, np.random.default_rng(0).permutation(b.d_ff))
raw = alignment_report(a, shuffled, r=4)
matched = alignment_report(a, shuffled, r=4, permute_first=True)
print(f"unaligned: rel L2 {raw.rel_l2:.3f}  singular-vector alignment {raw.sv_alignment:.3f}")
print(f"aligned:   rel L2 {matched.rel_l2:.3f}  singular-vector alignment {matched.sv_alignment:.3f}")

perm = weight_matching_permutation(a, shuffled)
x = np.random.default_rng(1).standard_normal((5, layer.d))
print("outputs unchanged by alignment:",
      np.allclose(expert_forward(apply_permutation(shuffled, perm), x), expert_forward(b, x), atol=1e-12))
