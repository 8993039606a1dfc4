"""Monte-Carlo look at why merging two experts loses information that
pruning one of them keeps."""

from moecompress.theory import canonical_scenario, dirichlet_cluster, synthesis_scenario, theory_report

rep = theory_report(canonical_scenario())
print("mixing ratio uniform on [0, 1], constant summed gate and unit expert gap")
print(f"  best merge error {rep.empirical_min_error:.5f} vs predicted {rep.predicted_error:.5f}"
      f" at alpha {rep.alpha_star_predicted:.3f}")

rep = theory_report(synthesis_scenario())
print("router mixes both experts, but the second one only ever gets a small gate")
print(f"  var(r)={rep.var_r:.3f}  E[g_j^2]={rep.mean_gj2:.4f}")
print(f"  merge error at alpha=E[r]: {rep.empirical_min_error:.5f}")
print(f"  prune error:               {rep.prune_error:.5f}")
# A constant alpha of 1 keeps only the first expert, which is exactly pruning
# the second, so the best alpha on the grid can never do worse than pruning.
print(f"  best constant alpha on the grid: {rep.grid_min_error:.5f}")

for conc in [(1, 1, 1, 1), (2, 1, 3, 2), (0.5, 0.5, 0.5, 1)]:
    h = dirichlet_cluster(conc, seed=1)
    print(f"3-member cluster, Dirichlet{conc}: factored {h.factored_error:.4f}"
          f" grid {h.direct_min_error:.4f} gap {h.relative_gap:.3%}")
