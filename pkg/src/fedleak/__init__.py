"""Gradient-leakage risk estimation for federated SGD clients.

A client simulator computes per-round batch gradients, a hierarchical
statistic network estimates the mutual information between the batched
inputs and the gradient (the leakage risk, in nats), and a gradient
inversion attack plus a covariance baseline validate the metric.
"""

__version__ = "0.1.0"

from .attack import AttackConfig, AttackReport, inference_error, run_attack
from .dataio import (ADULT_SCHEMA, Batch, Dataset, RawTable, gaussian_mi_nats,
                     gaussian_pairs, load_adult, parse_adult_rows, preprocess,
                     resample_imbalance, sample_batch)
from .errors import (AttackError, ConfigError, ContractError, EstimationError,
                     FedleakError, NumericError, ParseError, PreprocessError,
                     RunError, ShapeError)
from .fedsim import (FedConfig, FedTrajectory, GradientVector, LogisticRegression,
                     MlpClassifier, TaskModel, add_gradient_noise, aggregate,
                     compute_gradient, make_task_model, run_fedsgd)
from .harness import (ExperimentConfig, PrealarmResult, RunRecord, risk_prealarm,
                      run_convergence, run_estimate, run_factors, run_prealarm,
                      run_validate_attack)
from .miest import (EstimatorConfig, FlatStatNet, GaussianPairSource,
                    GradientPairSource, HierarchicalStatNet, MITrace,
                    check_convergence, covariance_metric, dv_lower_bound,
                    estimate_mi, estimate_mi_for_model, logmeanexp)
from .ndcore import AdamState, Mlp, Tensor, adam_step, backward, gradients
