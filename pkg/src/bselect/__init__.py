"""Bayesian online batch selection for accelerating classifier training.

Each training step scores a large candidate batch with a selection objective
that combines the model's posterior expected log-likelihood (from an online
last-layer Laplace approximation with Kronecker-factored curvature), a fixed
reference predictor's log-likelihood, and a redundancy penalty, then trains
only on the top-scoring sub-batch.
"""

from .data import (
    BatchStream,
    LabeledDataset,
    gen_synthetic,
    gen_synthetic_clusters,
    inject_symmetric_noise,
    load_binary,
    load_csv,
    make_imbalanced,
    save_binary,
    save_csv,
)
from .evaluation import (
    RunReport,
    compare_runs,
    epochs_to_target,
    make_report,
    noisy_fraction,
    redundant_fraction,
)
from .model import Network, OptimizerState, init_network, init_optimizer
from .posterior import LaplaceState, PredictiveGaussian, init_laplace
from .reference import ReferenceTable, build_prototype_reference, load_reference, save_reference
from .selection import ScoreVector, SelectorConfig
from .trainer import RunResult, SelectionTrace, TrainerConfig, run

__version__ = "0.1.0"

__all__ = [
    "BatchStream",
    "LabeledDataset",
    "LaplaceState",
    "Network",
    "OptimizerState",
    "PredictiveGaussian",
    "ReferenceTable",
    "RunReport",
    "RunResult",
    "ScoreVector",
    "SelectionTrace",
    "SelectorConfig",
    "TrainerConfig",
    "build_prototype_reference",
    "compare_runs",
    "epochs_to_target",
    "gen_synthetic",
    "gen_synthetic_clusters",
    "init_laplace",
    "init_network",
    "init_optimizer",
    "inject_symmetric_noise",
    "load_binary",
    "load_csv",
    "load_reference",
    "make_imbalanced",
    "make_report",
    "noisy_fraction",
    "redundant_fraction",
    "run",
    "save_binary",
    "save_csv",
    "save_reference",
]
