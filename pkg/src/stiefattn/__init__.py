"""Low-rank KV-cache compression with learned orthonormal bases."""

from .baselines import BaselineKind, eigen_basis, kqsvd_factors, ksvd_basis
from .decoder import (DecoderConfig, fold_bases, forward, forward_compressed, forward_folded, init_stack)
from .errors import (AllocationError, ConfigError, ContractError, ConvergenceError, DegenerateInputError,
                     DiagnosticsError, DimensionError, FormatError, RankDeficiencyError, StaleArtifactError,
                     StiefError, TrainingDivergedError)
from .linalg import qr_decompose, relative_error, svd
from .rng import RngState
from .stief import BasisStore, TrainConfig, baseline_store, candidate_ranks, layer_output_delta, run_algorithm_1
from .surface import (ErrorSurface, RankAllocation, aggregate_ratio, allocate_pareto, allocate_uniform,
                      allocate_weighted_pareto, compression_ratio, pareto_front, sensitivity_weights)

__version__ = "0.1.0"
