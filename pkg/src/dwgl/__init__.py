"""Directed-weighting group lasso: filter pruning for conv-eltwise networks."""

__version__ = "0.1.0"

from .errors import (ConfigError, DwglError, FormatError, GraphError, MaskError,
                     ShapeError, TapeError, TrainingDiverged)
from .network import CouplingGroup, NetworkConfig, NetworkGraph, build, coupling_groups
from .pruning import (CompressionReport, PruneMask, PruneVote, apply_mask,
                      compression_report, filter_activations, propose_votes,
                      resolve_vote)
from .regularizer import (RegularizerConfig, coeff, coeff_vector, filter_norms,
                          group_norm, layer_penalty, penalty_gradient, total_objective)
from .tensor import Tape, Tensor, backward, sgd_step

__all__ = [
    "ConfigError", "DwglError", "FormatError", "GraphError", "MaskError",
    "ShapeError", "TapeError", "TrainingDiverged",
    "CouplingGroup", "NetworkConfig", "NetworkGraph", "build", "coupling_groups",
    "CompressionReport", "PruneMask", "PruneVote", "apply_mask", "compression_report",
    "filter_activations", "propose_votes", "resolve_vote",
    "RegularizerConfig", "coeff", "coeff_vector", "filter_norms", "group_norm",
    "layer_penalty", "penalty_gradient", "total_objective",
    "Tape", "Tensor", "backward", "sgd_step",
    "__version__",
]
