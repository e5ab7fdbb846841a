"""Receptive-field regularized residual CNNs for acoustic scene classification, in numpy."""

from .damping import DampingSpec, build_damping_matrix, damped_conv2d
from .decomposition import DecompSpec, decomp_param_count, decompose_layer
from .errors import ConfigError, NonFiniteError, ShapeError, StateError, ValidationError, WavParseError
from .model import ArchSpec, build, summarize
from .pruning import apply_magnitude_pruning, enforce_masks, schedule_pruned_count
from .rf import LayerGeom, max_rf, rho_to_kernels

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ConfigError", "DampingSpec", "DecompSpec", "LayerGeom", "NonFiniteError", "ShapeError",
    "StateError", "ValidationError", "WavParseError", "apply_magnitude_pruning", "build",
    "build_damping_matrix", "damped_conv2d", "decomp_param_count", "decompose_layer", "enforce_masks",
    "max_rf", "rho_to_kernels", "schedule_pruned_count", "summarize",
]
