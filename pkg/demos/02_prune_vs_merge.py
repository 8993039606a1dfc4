"""Compress the same layer five ways at 25% and 50% and measure output error
on held-out tokens."""

from moecompress import SynthConfig, TokenStream, compare_methods, synth_model

for seed in range(3):
    layer = synth_model(SynthConfig(), seed)
    report = compare_methods(layer, TokenStream(layer.d, 2048, seed=seed),
                             TokenStream(layer.d, 1024, seed=seed, split="eval"))
    print(f"seed {seed}")
    print(f"  {'method':<10}{'ratio':>6}{'rel err':>10}{'gate jsd':>10}{'top-1':>8}")
    for e in report.entries:
        print(f"  {e['method']:<10}{e['ratio']:>6}{e['rel_error']:>10.4f}{e['gate_jsd']:>10.4f}"
              f"{e['top1_agreement']:>8.3f}")
