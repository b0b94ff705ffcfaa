"""Per-filter domain-shift detection and sparse filter reconstruction for small CNNs."""
from ._jit import backend_name
from .adapt import (
    AdaptConfig,
    ReconstructionModel,
    adapted_forward,
    fit_reconstruction,
    load_model,
    patch_responses,
    save_model,
)
from .divergence import DivergenceReport, a_distance, filter_kl_scores, kl_divergence
from .errors import (
    CollinearityError,
    DimensionError,
    FilterMendError,
    FormatError,
    NoReconstructionBasisError,
    UnreconstructableError,
)
from .sparse_select import LassoProblem, lambda_path, ols_refit, select_lambda, weighted_lasso
from .tensor import FilterSampleMatrix, ResponseTensor, conv2d_forward, from_sample_matrix, to_sample_matrix

__version__ = "0.1.0"
