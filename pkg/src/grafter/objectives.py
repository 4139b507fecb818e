"""Loss terms: masked task loss, co-activation consistency, score shrinkage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .routing import RelationMatrix, RoutingOutcome
from .tensor import Tensor, masked_bce_mean, _sigmoid

Array = np.ndarray


@dataclass(frozen=True)
class ObjectiveConfig:
    """consistency_weight scales the pairwise pull between co-activated
    adapters; relation_weight shrinks the routing scores toward uniform."""

    consistency_weight: float = 0.1
    relation_weight: float = 1e-3

    def __post_init__(self):
        if self.consistency_weight < 0.0:
            raise ConfigError(f"consistency weight must be >= 0, got {self.consistency_weight}")
        if self.relation_weight < 0.0:
            raise ConfigError(f"relation weight must be >= 0, got {self.relation_weight}")


@dataclass(frozen=True)
class LossReport:
    task: float
    consistency: float
    relation: float
    total: float
    per_task: tuple[float, ...]


@dataclass(frozen=True)
class CoactivationWeights:
    """Symmetric, zero-diagonal pair weights derived from routing, treated as
    constants: no gradient flows through them."""

    beta: Array

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ContractError(f"pair weights must be square, got shape {b.shape}")
        if (np.diag(b) != 0.0).any():
            raise ContractError("pair weights must have a zero diagonal")
        if (b != b.T).any():
            raise ContractError("pair weights must be symmetric")
        if (b < 0.0).any() or (b > 1.0).any():
            raise ContractError("pair weights must lie in [0, 1]")
        object.__setattr__(self, "beta", b)


def task_loss(logits: Tensor, targets, valid) -> Tensor:
    """Mean BCE-with-logits over valid entries of the whole batch."""
    return masked_bce_mean(logits, targets, valid)


def per_task_loss(logits: Array, targets: Array, valid: Array) -> tuple[float, ...]:
    """Per-task mean BCE for reporting; NaN for tasks with no valid labels."""
    out = []
    for t in range(logits.shape[1]):
        m = valid[:, t]
        if not m.any():
            out.append(float("nan"))
            continue
        x = logits[m, t]
        y = targets[m, t]
        per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        out.append(float(per.mean()))
    return tuple(out)


def beta_from_alpha(outcome: RoutingOutcome) -> CoactivationWeights:
    """beta[i,j] = mean over tasks of alpha[t,i]*alpha[t,j], i != j.

    Built from the routing values only (gradient-stopped), exactly symmetric
    by construction.
    """
    a = outcome.alpha.data
    n_tasks, k = a.shape
    beta = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            val = float(a[:, i] @ a[:, j]) / n_tasks
            beta[i, j] = beta[j, i] = val
    return CoactivationWeights(beta)


def consistency_reg(outputs, pair_weights) -> Tensor:
    """sum over ordered pairs i != j of beta[i,j] * ||outputs_i - outputs_j||^2.

    Both orders of each pair count, so each unordered pair contributes twice
    its weighted squared distance.
    """
    outputs = list(outputs)
    beta = pair_weights.beta if isinstance(pair_weights, CoactivationWeights) else (
        CoactivationWeights(np.asarray(pair_weights)).beta
    )
    if beta.shape[0] != len(outputs):
        raise ContractError(f"{len(outputs)} outputs but {beta.shape[0]}x{beta.shape[1]} pair weights")
    total: Tensor | None = None
    for i in range(len(outputs)):
        for j in range(i + 1, len(outputs)):
            if beta[i, j] == 0.0:
                continue
            term = (outputs[i] - outputs[j]).sq_frobenius().scale(2.0 * beta[i, j])
            total = term if total is None else total + term
    return total if total is not None else Tensor.zeros(1, 1)


def relation_reg(relation: RelationMatrix) -> Tensor:
    """Squared Frobenius norm of the routing scores; gradient is exactly 2*scores."""
    return relation.scores.sq_frobenius()


def total_loss(
    l_task: Tensor,
    l_consistency: Tensor,
    l_relation: Tensor,
    cfg: ObjectiveConfig,
    per_task: tuple[float, ...] = (),
) -> tuple[Tensor, LossReport]:
    """Combine the three terms; the report's decomposition matches the tensor."""
    for name, part in (("task", l_task), ("consistency", l_consistency), ("relation", l_relation)):
        if part.shape != (1, 1):
            raise ContractError(f"{name} loss must be 1x1, got {part.shape}")
        if not np.isfinite(part.data[0, 0]):
            raise NumericError(f"{name} loss is non-finite")
    total = l_task + l_consistency.scale(cfg.consistency_weight) + l_relation.scale(cfg.relation_weight)
    report = LossReport(
        task=l_task.item(),
        consistency=l_consistency.item(),
        relation=l_relation.item(),
        total=total.item(),
        per_task=per_task,
    )
    return total, report


def predict_probabilities(logits: Array) -> Array:
    """Sigmoid scores for ranking; monotone in the logits."""
    return _sigmoid(np.asarray(logits, dtype=np.float64))
