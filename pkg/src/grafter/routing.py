"""Task-to-adapter routing: tempered softmax over a learned score matrix,
hard threshold gate, renormalized survivors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, _softmax_rows, row_softmax, scale, weighted_sum

Array = np.ndarray


class RelationMatrix:
    """Trainable [tasks x adapters] routing scores. Zero init routes uniformly."""

    def __init__(self, scores: Tensor):
        self.scores = scores

    @classmethod
    def zeros(cls, num_tasks: int, num_adapters: int) -> "RelationMatrix":
        if num_tasks < 1 or num_adapters < 1:
            raise ContractError("relation matrix needs at least one task and one adapter")
        return cls(Tensor.zeros(num_tasks, num_adapters, requires_grad=True))

    @property
    def num_tasks(self) -> int:
        return self.scores.rows

    @property
    def num_adapters(self) -> int:
        return self.scores.cols


@dataclass(frozen=True)
class RoutingConfig:
    """temperature > 0 softens/sharpens the softmax; threshold in [0,1) gates."""

    temperature: float = 0.1
    threshold: float = 0.15

    def __post_init__(self):
        if not self.temperature > 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must be in [0, 1), got {self.threshold}")


@dataclass(frozen=True)
class RoutingOutcome:
    """alpha: [T x k] mixture weights, exact zeros where ``active`` is False."""

    alpha: Tensor
    active: Array


def route(relation: RelationMatrix, cfg: RoutingConfig) -> RoutingOutcome:
    """Softmax(scores / temperature) per task row, drop entries below the
    threshold, renormalize survivors. The drop decision is a forward-pass
    mask; gradients flow only through surviving entries. If a whole row falls
    below the threshold, its argmax survives (lowest index on ties).
    """
    logits = scale(relation.scores, 1.0 / cfg.temperature)
    probs = _softmax_rows(logits.data)  # gate decision only, no gradient
    # p > 0 keeps "alpha zero exactly where inactive" true under underflow
    active = (probs >= cfg.threshold) & (probs > 0.0)
    for t in np.flatnonzero(~active.any(axis=1)):
        active[t, int(np.argmax(probs[t]))] = True
    alpha = row_softmax(logits, active)
    return RoutingOutcome(alpha=alpha, active=active)


def compose(outputs, alpha_row: Tensor, active_row: Array | None = None, counter=None) -> Tensor:
    """Mix k adapter outputs with one task's weights. Inactive entries carry
    exactly zero weight, so skipping them changes nothing but the op count."""
    outputs = list(outputs)
    if alpha_row.rows != 1:
        raise ContractError(f"alpha_row must be a single row, got {alpha_row.shape}")
    if len(outputs) != alpha_row.cols:
        raise ContractError(f"{len(outputs)} outputs for {alpha_row.cols} routing weights")
    if active_row is None:
        ids = list(range(len(outputs)))
    else:
        ids = [int(i) for i in np.flatnonzero(np.asarray(active_row, dtype=bool))]
        if not ids:
            raise ContractError("compose: no active adapters for this task")
    return weighted_sum([outputs[i] for i in ids], alpha_row, cols=ids, counter=counter)


def routing_entropy(outcome: RoutingOutcome) -> Array:
    """Per-task Shannon entropy of the mixture weights (nats)."""
    a = outcome.alpha.data
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0.0, a * np.log(a), 0.0)
    return -terms.sum(axis=1)


def alpha_csv_lines(outcome: RoutingOutcome) -> list[str]:
    """Rows for alpha.csv: one line per (task, adapter) pair."""
    lines = ["task_id,adapter_id,weight,active"]
    a = outcome.alpha.data
    act = outcome.active
    for t in range(a.shape[0]):
        for i in range(a.shape[1]):
            lines.append(f"{t},{i},{float(a[t, i])!r},{int(act[t, i])}")
    return lines
