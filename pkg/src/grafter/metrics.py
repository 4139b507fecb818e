"""Evaluation metrics: per-task average precision, adapter-allocation accuracy,
and the deterministic compute counter."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .routing import RoutingOutcome

Array = np.ndarray

# brute-force assignment search is fine only for small banks
MAX_BRUTE_FORCE_ADAPTERS = 8


@dataclass
class ComputeCounter:
    """Exact operation counts for compute claims; wall clocks are too flaky."""

    adapter_evals: int = 0
    compose_terms: int = 0

    @property
    def composition_ops(self) -> int:
        return self.adapter_evals + self.compose_terms

    def snapshot(self) -> tuple[int, int]:
        return (self.adapter_evals, self.compose_terms)


@dataclass(frozen=True)
class ApResult:
    per_task: tuple[float, ...]  # NaN where skipped
    mean: float
    skipped: tuple[int, ...]


def _ap_single(scores: Array, labels: Array) -> float:
    # descending score, ties broken by ascending original index
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    precision_at = hits / np.arange(1, ranked.shape[0] + 1)
    n_pos = hits[-1]
    return float(precision_at[ranked == 1].sum() / n_pos)


def average_precision(scores: Array, labels: Array, valid: Array) -> ApResult:
    """Mean AP over tasks that have at least one valid positive and one valid
    negative; other tasks are skipped and reported. Raises if nothing is left.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    if s.shape != y.shape or s.shape != m.shape or s.ndim != 2:
        raise ContractError(f"scores {s.shape}, labels {y.shape}, mask {m.shape} must match, 2-D")
    per: list[float] = []
    skipped: list[int] = []
    for t in range(s.shape[1]):
        mt = m[:, t]
        yt = y[mt, t]
        if yt.size == 0 or (yt == 1).sum() == 0 or (yt == 0).sum() == 0:
            per.append(float("nan"))
            skipped.append(t)
            continue
        per.append(_ap_single(s[mt, t], yt))
    included = [p for p in per if not np.isnan(p)]
    if not included:
        raise ContractError("average_precision: every task was skipped")
    return ApResult(per_task=tuple(per), mean=float(np.mean(included)), skipped=tuple(skipped))


def awa(outcome: RoutingOutcome, cluster_of_task) -> float:
    """Adapter-allocation accuracy: fraction of tasks whose argmax adapter
    matches the planted cluster under the best injective cluster-to-adapter
    assignment (brute force; argmax ties go to the lowest adapter index)."""
    a = outcome.alpha.data
    n_tasks, k = a.shape
    clusters = np.asarray(cluster_of_task, dtype=np.int64)
    if clusters.shape != (n_tasks,):
        raise ContractError(f"cluster map has {clusters.shape} entries for {n_tasks} tasks")
    n_clusters = int(clusters.max()) + 1
    if set(np.unique(clusters)) != set(range(n_clusters)):
        raise ContractError("cluster ids must cover 0..C-1")
    if k < n_clusters:
        raise ContractError(f"{k} adapters cannot host {n_clusters} clusters one-to-one")
    if k > MAX_BRUTE_FORCE_ADAPTERS:
        raise ContractError(f"assignment search supports at most {MAX_BRUTE_FORCE_ADAPTERS} adapters")
    choice = np.argmax(a, axis=1)  # first index wins ties
    best = 0
    for perm in itertools.permutations(range(k), n_clusters):
        assigned = np.asarray(perm)[clusters]
        best = max(best, int((choice == assigned).sum()))
    return float(best / n_tasks)
