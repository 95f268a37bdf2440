"""Sharpness and representation-compression metrics for small networks,
with runtime verification of their derived bounds."""

__version__ = "0.1.0"

from .datasets import Dataset, load_idx_images, synth_gaussian_mixture
from .errors import (ConfigError, ContractViolation, DivergenceError,
                     FormatError, NumericFailure, SharpcompError,
                     StructureError, UndefinedCorrelationError)
from .linalg import (Spectrum, SvdResult, log_pseudo_det_gram,
                     spectral_norm_operator, svd, sym_eig, vector_p_norm)
from .metrics import (SampleAnalysis, adaptive_sharpness_estimate,
                      evaluate_record, input_invariant_mls,
                      local_dimensionality, lvr_stats, mls, mse_loss, nmls,
                      normalized_mls, nvr_stats, sharpness_approx)
from .nets import (Activation, Conv2d, Dense, ForwardTrace, JacobianBundle,
                   Network, ResidualBlock, forward, identity_eq4_check,
                   jacobians, load_network)
from .records import BoundReport, MetricRecord, OracleReport
from .trainer import Checkpoint, SGDNetRegressor, TrainConfig, init_network, train_sgd

__all__ = [name for name in dir() if not name.startswith("_")]
