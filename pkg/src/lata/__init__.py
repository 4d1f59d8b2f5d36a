"""Label-free transductive refinement over a kNN graph, with failure-aware
split conformal prediction and a seeded benchmark harness."""

from .conformal import (ConformalThreshold, FailureAwareParams, PredictionSet,
                        ScoreRule, base_score, base_score_matrix, calibrate,
                        conformal_rank, predict_set, score_aps,
                        score_failure_aware, score_lac, score_raps)
from .core import (LabeledExample, PrototypeBank, average_prototype,
                   build_prototype_bank, normalize, normalize_rows, softmax,
                   zero_shot_prob_matrix, zero_shot_probs)
from .dataio import (RunConfig, load_dataset, load_vilu_bundle, read_labels,
                     read_matrix, write_dataset, write_labels, write_matrix,
                     write_vilu_bundle)
from .errors import ConfigError, DataError, LataError, NumericalError
from .graph import (SparseAffinityGraph, build_graph, knn_indices,
                    laplacian_quadratic, median_bandwidth, neighbor_aggregate,
                    pairwise_interaction)
from .harness import (ControlResult, ExperimentResult, WindowPlan,
                      double_dip_control, fit_mean_probe, kshot_indices,
                      largest_remainder_counts, plan_windows,
                      run_control_experiment, run_experiment, run_trial,
                      run_window, sample_kshot, time_window_compute, trial_rng)
from .metrics import (ConformalReport, EvaluationRecord, aca, build_report,
                      ccv, coverage, mean_size)
from .refine import (ClassPrior, RefineConfig, RefineTrace, apply_prior,
                     cccp_surrogate, estimate_prior, kl_fidelity, objective,
                     refine, restore_topk, truncate_topk)
from .signals import (FailureSignals, HeuristicProvider, OracleProvider,
                      ViluProvider, ViluWeights, attention_forward,
                      heuristic_signals, oracle_signals, vilu_u)
from .synthetic import SyntheticDataset, SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
