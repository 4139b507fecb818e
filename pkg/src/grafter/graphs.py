"""Graphs, symmetric adjacency normalization, and block-diagonal batching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, segment_mean

Array = np.ndarray


@dataclass(frozen=True)
class Graph:
    """One undirected graph: node count, edge list, node features, task targets.

    ``y`` holds one value per task: 0.0, 1.0, or NaN for a missing label.
    Graphs are immutable after construction.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    x: Tensor
    y: Array

    def __post_init__(self):
        if self.n < 1:
            raise ContractError(f"graph needs at least one node, got n={self.n}")
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ContractError(f"edge ({u},{v}) has endpoints outside [0,{self.n})")
            if u == v:
                raise ContractError(f"self-loop ({u},{v}) is not allowed")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ContractError(f"duplicate edge ({u},{v})")
            seen.add(key)
        if self.x.rows != self.n:
            raise ContractError(f"feature matrix has {self.x.rows} rows for n={self.n}")
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 1:
            raise ContractError(f"targets must be a vector, got shape {y.shape}")
        ok = np.isnan(y) | (y == 0.0) | (y == 1.0)
        if not ok.all():
            raise ContractError("targets must be 0, 1, or NaN (missing)")
        object.__setattr__(self, "y", y)

    @property
    def num_tasks(self) -> int:
        return self.y.shape[0]


def adjacency(g: Graph) -> Array:
    a = np.zeros((g.n, g.n))
    for u, v in g.edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    return a


def normalize_adjacency(g: Graph) -> Tensor:
    """D^(-1/2) A D^(-1/2) without self-loops; zero-degree nodes get d^(-1/2)=0,
    so isolated nodes propagate nothing and rely on their own features."""
    a = adjacency(g)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0.0, 1.0 / np.sqrt(deg), 0.0)
    return Tensor(dinv[:, None] * a * dinv[None, :])


@dataclass(frozen=True)
class GraphBatch:
    """A batch of graphs glued into one block-diagonal system.

    ``y`` is the dense [B, T] target matrix with 0.0 at missing positions and
    ``mask`` False there; losses must consult the mask, never the placeholder.
    """

    graphs: tuple[Graph, ...]
    a_hat: Tensor
    x: Tensor
    segment_ids: Array
    y: Array
    mask: Array

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_tasks(self) -> int:
        return self.y.shape[1]


def make_batch(graphs) -> GraphBatch:
    gs = tuple(graphs)
    if not gs:
        raise ContractError("make_batch: empty graph list")
    d_in = gs[0].x.cols
    n_tasks = gs[0].num_tasks
    for g in gs:
        if g.x.cols != d_in:
            raise ContractError(f"make_batch: feature widths differ ({d_in} vs {g.x.cols})")
        if g.num_tasks != n_tasks:
            raise ContractError(f"make_batch: task counts differ ({n_tasks} vs {g.num_tasks})")
    total = sum(g.n for g in gs)
    a_hat = np.zeros((total, total))
    seg = np.empty(total, dtype=np.int64)
    offset = 0
    for i, g in enumerate(gs):
        a_hat[offset : offset + g.n, offset : offset + g.n] = normalize_adjacency(g).data
        seg[offset : offset + g.n] = i
        offset += g.n
    x = np.vstack([g.x.data for g in gs])
    y_raw = np.stack([g.y for g in gs])
    mask = ~np.isnan(y_raw)
    y = np.where(mask, y_raw, 0.0)
    return GraphBatch(
        graphs=gs,
        a_hat=Tensor._wrap(a_hat, False, "make_batch"),
        x=Tensor._wrap(x, False, "make_batch"),
        segment_ids=seg,
        y=y,
        mask=mask,
    )


def mean_pool(h: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Per-graph mean over node states; gradient splits 1/n_g to each node."""
    return segment_mean(h, segment_ids, num_segments)
