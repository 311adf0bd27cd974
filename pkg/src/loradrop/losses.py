"""Task losses, the distribution-consistency compensation losses, and the
twin-pass training step that combines them.

The twin pass runs the same batch through two stochastic forwards (or one
stochastic plus one inference forward), pulls the two output
distributions together with a KL-based loss, and backpropagates through
the first branch only; the second branch's outputs are constants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import Model
from .tensor import Tensor

PROB_EPS = 1e-12


class CompensationKind(enum.Enum):
    NONE = "none"
    KL_BIDIRECTIONAL = "kl_bidirectional"
    JS_TO_INFERENCE = "js_to_inference"


@dataclass(frozen=True)
class CompensationSpec:
    kind: CompensationKind = CompensationKind.NONE
    weight: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ContractError("compensation weight must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind is not CompensationKind.NONE and self.weight > 0.0


@dataclass
class TwinPassResult:
    task_loss: float
    consistency_loss: float
    total_loss: float
    p1: np.ndarray
    p2: np.ndarray | None
    loss: Tensor  # graph root: task + weight * consistency


def _check_prob_pair(p: Tensor, q: Tensor) -> None:
    if p.shape != q.shape:
        raise ContractError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for t in (p, q):
        if np.any(t.data < 0):
            raise ContractError("probabilities must be nonnegative")
        if np.any(np.abs(t.data.sum(axis=-1) - 1.0) > 1e-9):
            raise ContractError("probability rows must sum to 1 within 1e-9")


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) with entries clamped before the logs; the
    result is averaged over rows."""
    logp = T.log(T.clamp_min(p, PROB_EPS))
    logq = T.log(T.clamp_min(q, PROB_EPS))
    per_row = T.sum_(T.mul(p, T.sub(logp, logq)), axis=-1)
    return T.mean(per_row)


def kl_bidirectional(p1: Tensor, p2: Tensor) -> Tensor:
    """Symmetric consistency loss: (KL(p1||p2) + KL(p2||p1)) / 2."""
    p1, p2 = T._as_tensor(p1), T._as_tensor(p2)
    _check_prob_pair(p1, p2)
    return T.scale(T.add(_kl_rows(p1, p2), _kl_rows(p2, p1)), 0.5)


def js_to_inference(p_train: Tensor, p_infer: Tensor) -> Tensor:
    """KL of the stochastic-pass distribution against the (detached)
    inference distribution for the same input."""
    p_train, p_infer = T._as_tensor(p_train), T._as_tensor(p_infer)
    _check_prob_pair(p_train, p_infer)
    return _kl_rows(p_train, T.detach(p_infer))


def task_loss(head_output: Tensor, target) -> Tensor:
    """Cross-entropy for probability rows, mean squared error for scalars."""
    if head_output.data.ndim == 2:
        target = np.asarray(target, dtype=np.int64)
        b, nc = head_output.shape
        if target.shape != (b,):
            raise ContractError(f"target shape {target.shape} does not match batch {b}")
        if np.any(target < 0) or np.any(target >= nc):
            raise ContractError(f"class index out of range [0, {nc})")
        onehot = np.zeros((b, nc))
        onehot[np.arange(b), target] = 1.0
        picked = T.sum_(T.mul(T.log(T.clamp_min(head_output, PROB_EPS)), Tensor(onehot)), axis=-1)
        return T.neg(T.mean(picked))
    if head_output.data.ndim == 1:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != head_output.shape:
            raise ContractError(f"target shape {target.shape} does not match {head_output.shape}")
        diff = T.sub(head_output, Tensor(target))
        return T.mean(T.mul(diff, diff))
    raise ContractError(f"unsupported head output shape {head_output.shape}")


def _representation_mse(a: Tensor, b: Tensor) -> Tensor:
    diff = T.sub(a, T.detach(b))
    return T.mean(T.mul(diff, diff))


def twin_pass_step(batch, model: Model, compensation: CompensationSpec, step_seed: int,
                   force_same_masks: bool = False, mask_overrides=None) -> TwinPassResult:
    """One training objective evaluation.

    Branch 1 always runs in training mode and carries the task loss. When
    compensation is active a second pass runs (stochastic for the
    bidirectional KL, inference for the JS variant) whose outputs are
    detached, and the weighted consistency term is added. With inactive
    compensation the second pass is skipped entirely.
    """
    tokens, targets = batch
    res1 = model.forward(tokens, training=True, mask_seed=step_seed, branch=0,
                         mask_overrides=mask_overrides)
    loss_task = task_loss(res1.output, targets)

    regression = model.config.head == "regressor"
    p2_data = None
    if compensation.active:
        if compensation.kind is CompensationKind.KL_BIDIRECTIONAL:
            branch2 = 0 if force_same_masks else 1
            # branch 2 is detached everywhere, so its graph is never needed
            with T.no_grad():
                res2 = model.forward(tokens, training=True, mask_seed=step_seed, branch=branch2,
                                     mask_overrides=mask_overrides)
            if regression:
                cons = _representation_mse(res1.pooled, res2.pooled)
            else:
                cons = kl_bidirectional(res1.output, T.detach(res2.output))
        else:
            with T.no_grad():
                res2 = model.forward(tokens, training=False)
            if regression:
                cons = _representation_mse(res1.pooled, res2.pooled)
            else:
                cons = js_to_inference(res1.output, res2.output)
        p2_data = res2.output.data.copy()
        total = T.add(loss_task, T.scale(cons, compensation.weight))
        cons_val = cons.item()
    else:
        total = loss_task
        cons_val = 0.0

    return TwinPassResult(
        task_loss=loss_task.item(),
        consistency_loss=cons_val,
        total_loss=total.item(),
        p1=res1.output.data.copy(),
        p2=p2_data,
        loss=total,
    )
