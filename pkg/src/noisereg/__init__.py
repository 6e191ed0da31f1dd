"""Regularized neural networks under input noise, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import ContractError, DimensionError, NonFiniteError, Tensor, grad, no_grad
from .gradcheck import check_gradients
from .jacobian import input_jacobian
from .nn import Mode, Network, build_deep_mlp_standin, build_shallow_convnet
from .regularizers import (
    ConfigError,
    RegularizerConfig,
    Scheme,
    composite_loss,
    darc1_penalty,
    jacobian_penalty,
    l2_penalty,
    lcnn_penalty,
    power_iteration,
    spectral_normalize_step,
)
from .complexity import ComplexityReport, full_report, table2_bounds
from .noise import NoiseConfig, inject_noise, noise_sweep, per_class_std
from .data import LabeledDataset, SplitSpec, load_csv, load_dataset, load_idx, split, standardize, subsample
from .checkpoint import load_checkpoint, save_checkpoint
from .training import AdamState, TrainConfig, TrainReport, adam_step, grid_search, train
from .experiment import ExperimentConfig, emit_reports, run_experiment_matrix

__all__ = [name for name in dir() if not name.startswith("_")]
