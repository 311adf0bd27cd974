"""loradrop: structured transformer dropout for low-rank-adapter finetuning.

A small float64 autodiff engine, structural mask sampling, the dropout
positions (logit, weight, hidden, input, output) with their correct
rescaling, closed-form gradient oracles, a toy LoRA transformer, the
twin-pass consistency losses, and a desk-scale experiment harness.
"""

from ._kernels import backend as kernels_backend
from .analytic import (
    EquivalenceReport,
    LogitInstance,
    ratio_k,
    run_verification,
    verify_instance,
)
from .dropout import DropoutSpec, LayerScope, Position, Rescale
from .errors import (
    ContractError,
    DegeneracyError,
    DimensionError,
    LoraDropError,
    NumericError,
)
from .losses import CompensationKind, CompensationSpec, kl_bidirectional, js_to_inference
from .masks import AxisSemantics, MaskPlan, StructuralPattern, kept_fraction, sample_mask
from .model import LoRALinear, Model, ModelConfig
from .tasks import SyntheticTask
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AxisSemantics",
    "CompensationKind",
    "CompensationSpec",
    "ContractError",
    "DegeneracyError",
    "DimensionError",
    "DropoutSpec",
    "EquivalenceReport",
    "LayerScope",
    "LogitInstance",
    "LoRALinear",
    "LoraDropError",
    "MaskPlan",
    "Model",
    "ModelConfig",
    "NumericError",
    "Position",
    "Rescale",
    "StructuralPattern",
    "SyntheticTask",
    "Tensor",
    "js_to_inference",
    "kept_fraction",
    "kernels_backend",
    "kl_bidirectional",
    "no_grad",
    "ratio_k",
    "run_verification",
    "sample_mask",
    "verify_instance",
]
