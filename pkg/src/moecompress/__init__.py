"""Expert pruning and merging for sparse mixture-of-experts layers."""

from .analysis import (alignment_report, expert_distance, functional_subspace, jsd, ngram_diversity,
                       relative_l2, sv_alignment)
from .calibration import CalibStats, TokenStream, calibrate, merge_stats, representative_vectors
from .errors import (ConfigError, DimensionError, DomainError, FormatError, HeaderError, ManifestError,
                     MoeCompressError, TruncatedError, VersionError)
from .io import load_model, save_model
from .merge import (Clustering, MergedLayer, MergePlan, apply_merge_plan, apply_permutation, build_merge_plan,
                    cluster_hcsmoe, cluster_msmoe, merge_weights, singleton_fraction, weight_matching_permutation)
from .moe import (ExpertWeights, GateResult, MoeLayer, RouterConfig, SynthConfig, expert_forward, gate_compute,
                  layer_forward, synth_model)
from .numerics import linear_assignment, pca, softmax, svd
from .pipeline import compare_methods, compress, run_eval
from .prune import PrunePlan, apply_prune, compute_saliency, select_prune_set
from .theory import (MixScenario, canonical_scenario, hierarchical_error_mc, merge_error_mc, optimal_alpha,
                     prune_error_mc, synthesis_scenario)

__version__ = "0.1.0"
