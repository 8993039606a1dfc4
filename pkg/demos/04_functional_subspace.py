"""Project per-expert mean activations onto the original layer's top two
principal axes, before and after compression, and write the scatter as CSV."""

import sys

from moecompress import SynthConfig, TokenStream, synth_model
from moecompress.pipeline import subspace_experiment

layer = synth_model(SynthConfig(), seed=0)
report = subspace_experiment(layer, TokenStream(layer.d, 2048, seed=0).array(), ratio=0.5)

for variant, tv in report.total_variance.items():
    r1, r2 = report.axis_range[variant]
    print(f"{variant:>8}: total variance {tv:.4f}  range pc1 {r1:.3f}  pc2 {r2:.3f}")
print(f"collapse ratio (original / merged) {report.collapse_ratio:.2f}")

out = sys.argv[1] if len(sys.argv) > 1 else "subspace.csv"
with open(out, "w") as fh:
    fh.write("\n".join(report.csv_rows()) + "\n")
print(f"wrote {out}")
