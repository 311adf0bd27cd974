"""The dropping positions as differentiable operations.

Five places to inject noise, each with the rescale that keeps training
and inference scales consistent:

* drop_key        — attention logits, additive -inf mask, no rescale
                    (the following softmax renormalizes);
* drop_attention  — attention weights, zero mask then division by the
                    surviving row mass, optionally with the denominator
                    treated as a constant during backprop;
* hidden_cut      — feed-forward hidden states, zero mask + 1/(1-p);
* input_cutoff    — embedding sequences, zero mask + 1/(1-p);
* output_dropout  — pooled output representation, classic elementwise
                    dropout + 1/(1-p).

All ops are identity when rate is zero or ``training`` is false.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegeneracyError
from .masks import MaskPlan, StructuralPattern
from .tensor import Tensor


class Position(enum.Enum):
    ATTN_LOGITS = "attn_logits"
    ATTN_WEIGHTS = "attn_weights"
    FFN_HIDDEN = "ffn_hidden"
    INPUT_EMBED = "input_embed"
    OUTPUT_REPR = "output_repr"
    NONE = "none"


class Rescale(enum.Enum):
    NORMALIZED = "normalized"
    INVERTED_RATE = "inverted_rate"
    NONE = "none"


class LayerScope(enum.Enum):
    ALL_LAYERS = "all_layers"
    LATTER_HALF = "latter_half"


_REQUIRED_RESCALE = {
    Position.ATTN_LOGITS: Rescale.NONE,
    Position.ATTN_WEIGHTS: Rescale.NORMALIZED,
    Position.FFN_HIDDEN: Rescale.INVERTED_RATE,
    Position.INPUT_EMBED: Rescale.INVERTED_RATE,
    Position.OUTPUT_REPR: Rescale.INVERTED_RATE,
}


@dataclass(frozen=True)
class DropoutSpec:
    """One point in the design space: position x pattern x rate x rescale."""

    position: Position
    pattern: StructuralPattern = StructuralPattern.ELEMENT
    rate: float = 0.0
    rescale: Rescale | None = None
    grad_stop_denominator: bool = False
    layer_scope: LayerScope = LayerScope.ALL_LAYERS

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ContractError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.position is Position.NONE:
            object.__setattr__(self, "rescale", Rescale.NONE)
            return
        required = _REQUIRED_RESCALE[self.position]
        if self.rescale is None:
            object.__setattr__(self, "rescale", required)
        elif self.rescale is not required:
            raise ContractError(
                f"position {self.position.value} requires rescale {required.value}, got {self.rescale.value}"
            )
        if self.grad_stop_denominator and self.position is not Position.ATTN_WEIGHTS:
            raise ContractError("grad_stop_denominator only applies to attention-weight dropout")

    def applies_to_layer(self, layer_idx: int, num_layers: int) -> bool:
        if self.layer_scope is LayerScope.ALL_LAYERS:
            return True
        return layer_idx >= -(-num_layers // 2)  # ceil(num_layers / 2)


def drop_key(logits: Tensor, mask) -> Tensor:
    """Set dropped attention logits to -inf before the softmax."""
    keep = _keep_array(mask)
    out = T.masked_fill(logits, keep == 0, -np.inf)
    row_dead = np.max(out.data, axis=-1) == -np.inf
    if np.any(row_dead):
        raise DegeneracyError("drop_key left a query row with no surviving key")
    return out


def drop_attention(weights: Tensor, mask, grad_stop: bool) -> Tensor:
    """Zero dropped attention weights and renormalize each row by its
    surviving mass; with grad_stop the denominator is a constant in the
    backward pass."""
    keep = _keep_array(mask)
    masked = T.mul(weights, Tensor(keep.astype(np.float64)))
    denom = T.sum_(masked, axis=-1, keepdims=True)
    if np.any(denom.data < 1e-300):
        raise DegeneracyError("drop_attention: a row's surviving weight mass vanished")
    if grad_stop:
        denom = T.detach(denom)
    return T.div(masked, denom)


def hidden_cut(h: Tensor, mask, rate: float, training: bool = True) -> Tensor:
    """Zero dropped hidden entries and amplify survivors by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return h
    keep = _keep_array(mask).astype(np.float64)
    return T.mul(h, Tensor(keep * (1.0 / (1.0 - rate))))


def input_cutoff(embeddings: Tensor, mask, rate: float, training: bool = True) -> Tensor:
    """hidden_cut applied to the embedding sequence (data augmentation)."""
    return hidden_cut(embeddings, mask, rate, training=training)


def output_dropout(repr_: Tensor, rate: float, seed: int, training: bool = True) -> Tensor:
    """Classic elementwise dropout on the pooled output representation.

    Samples its own Bernoulli mask; an all-drop draw is legal and yields
    a zero vector.
    """
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return repr_
    rng = np.random.default_rng(seed)
    keep = (rng.random(repr_.shape) >= rate).astype(np.float64)
    return T.mul(repr_, Tensor(keep * (1.0 / (1.0 - rate))))


def _keep_array(mask) -> np.ndarray:
    if isinstance(mask, MaskPlan):
        return mask.grid
    return np.asarray(mask)
