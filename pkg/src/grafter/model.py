"""The composed model: frozen-able GCN backbone, per-layer adapter taps,
learned task routing, one linear scorer per task."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .adapters import AdapterBank
from .backbone import Backbone, layer_forward
from .errors import ContractError
from .graphs import GraphBatch, mean_pool
from .objectives import (
    CoactivationWeights,
    LossReport,
    ObjectiveConfig,
    beta_from_alpha,
    consistency_reg,
    per_task_loss,
    relation_reg,
    task_loss,
    total_loss,
)
from .routing import RelationMatrix, RoutingConfig, RoutingOutcome, route
from .tensor import Tensor, add_bias, concat_cols, matmul, weighted_sum

Array = np.ndarray


class RegEvent(NamedTuple):
    """Pooled adapter outputs at one insertion tap. ``task`` is None at the
    shared first tap, where every task sees the same states."""

    layer: int
    task: int | None
    adapter_ids: tuple[int, ...]
    pooled: tuple[Tensor, ...]


class ForwardResult(NamedTuple):
    logits: Tensor  # [B x T]
    task_states: list[Tensor]
    outcome: RoutingOutcome
    events: list[RegEvent]


@dataclass(frozen=True)
class ParamCounts:
    trainable: int
    total: int


class ComposedGcn:
    """Per task, node states flow through the backbone; at every insertion
    layer the states pass through the active adapters and are mixed with that
    task's routing weights before continuing. Layers before the first
    insertion run once and are shared."""

    def __init__(
        self,
        backbone: Backbone,
        bank: AdapterBank,
        relation: RelationMatrix,
        heads: list[tuple[Tensor, Tensor]],
        routing_cfg: RoutingConfig,
    ):
        if relation.num_adapters != bank.num_adapters:
            raise ContractError(
                f"relation matrix routes {relation.num_adapters} adapters, bank holds {bank.num_adapters}"
            )
        if len(heads) != relation.num_tasks:
            raise ContractError(f"{len(heads)} heads for {relation.num_tasks} tasks")
        bad = [l for l in bank.layers if not 0 <= l < backbone.depth]
        if bad:
            raise ContractError(f"insertion layers {bad} outside backbone depth {backbone.depth}")
        self.backbone = backbone
        self.bank = bank
        self.relation = relation
        self.heads = heads
        self.routing_cfg = routing_cfg

    @classmethod
    def build(
        cls,
        *,
        d_in: int,
        d_hidden: int = 64,
        depth: int = 3,
        num_tasks: int,
        num_adapters: int,
        rank: int = 4,
        routing_cfg: RoutingConfig | None = None,
        seed: int = 0,
        insertion_layers=None,
        inner_relu: bool = False,
    ) -> "ComposedGcn":
        routing_cfg = routing_cfg or RoutingConfig()
        backbone = Backbone.build(d_in, d_hidden, depth, seed)
        layers = tuple(range(depth)) if insertion_layers is None else tuple(sorted(insertion_layers))
        bank = AdapterBank.build(layers, d_hidden, num_adapters, rank, seed, inner_relu=inner_relu)
        relation = RelationMatrix.zeros(num_tasks, num_adapters)
        rng = np.random.default_rng([seed, 37])
        heads = []
        for _ in range(num_tasks):
            bound = np.sqrt(6.0 / (d_hidden + 1))
            w = Tensor(rng.uniform(-bound, bound, size=(d_hidden, 1)), requires_grad=True)
            b = Tensor.zeros(1, 1, requires_grad=True)
            heads.append((w, b))
        return cls(backbone, bank, relation, heads, routing_cfg)

    @property
    def num_tasks(self) -> int:
        return self.relation.num_tasks

    @property
    def num_adapters(self) -> int:
        return self.relation.num_adapters

    @property
    def insertion_layers(self) -> tuple[int, ...]:
        return self.bank.layers

    # -- forward ------------------------------------------------------------

    def _tap(self, layer: int, task: int | None, h: Tensor, ids, batch: GraphBatch, counter, events):
        outs = self.bank.forward_selected(layer, h, ids, counter)
        pooled = tuple(
            mean_pool(z, batch.segment_ids, batch.num_graphs) for _, z in outs
        )
        events.append(RegEvent(layer, task, tuple(i for i, _ in outs), pooled))
        return outs

    def _mix(self, outs, task: int, alpha_rows, active: Array, counter) -> Tensor:
        ids = [i for i, _ in outs if active[task, i]]
        items = [z for i, z in outs if active[task, i]]
        if not items:
            raise ContractError(f"task {task} has no active adapters")  # route() prevents this
        return weighted_sum(items, alpha_rows[task], cols=ids, counter=counter)

    def forward(self, batch: GraphBatch, counter=None) -> ForwardResult:
        if batch.num_tasks != self.num_tasks:
            raise ContractError(f"batch has {batch.num_tasks} tasks, model expects {self.num_tasks}")
        if batch.x.cols != self.backbone.d_in:
            raise ContractError(f"batch features {batch.x.cols} wide, backbone takes {self.backbone.d_in}")
        outcome = route(self.relation, self.routing_cfg)
        active = outcome.active
        n_tasks = self.num_tasks
        alpha_rows = [outcome.alpha.row(t) for t in range(n_tasks)]
        taps = set(self.insertion_layers)
        events: list[RegEvent] = []

        states: list[Tensor] | None = None  # per-task states once routing diverges
        h = batch.x
        for l, layer in enumerate(self.backbone.layers):
            if states is None:
                h = layer_forward(layer, batch.a_hat, h)
                if l in taps:
                    union = tuple(int(i) for i in np.flatnonzero(active.any(axis=0)))
                    outs = self._tap(l, None, h, union, batch, counter, events)
                    states = [self._mix(outs, t, alpha_rows, active, counter) for t in range(n_tasks)]
            else:
                states = [layer_forward(layer, batch.a_hat, s) for s in states]
                if l in taps:
                    mixed = []
                    for t in range(n_tasks):
                        ids = tuple(int(i) for i in np.flatnonzero(active[t]))
                        outs = self._tap(l, t, states[t], ids, batch, counter, events)
                        mixed.append(self._mix(outs, t, alpha_rows, active, counter))
                    states = mixed

        if states is None:
            pooled_shared = mean_pool(h, batch.segment_ids, batch.num_graphs)
            pooled = [pooled_shared] * n_tasks
            states = [h] * n_tasks
        else:
            pooled = [mean_pool(s, batch.segment_ids, batch.num_graphs) for s in states]

        logit_cols = [add_bias(matmul(pooled[t], self.heads[t][0]), self.heads[t][1]) for t in range(n_tasks)]
        logits = concat_cols(logit_cols)
        return ForwardResult(logits=logits, task_states=states, outcome=outcome, events=events)

    # -- loss ----------------------------------------------------------------

    def loss(self, fwd: ForwardResult, batch: GraphBatch, objective: ObjectiveConfig) -> tuple[Tensor, LossReport]:
        l_task = task_loss(fwd.logits, batch.y, batch.mask)
        pair_weights = beta_from_alpha(fwd.outcome)
        l_cons = self._consistency_over_events(fwd.events, pair_weights)
        l_rel = relation_reg(self.relation)
        per = per_task_loss(fwd.logits.data, batch.y, batch.mask)
        return total_loss(l_task, l_cons, l_rel, objective, per_task=per)

    @staticmethod
    def _consistency_over_events(events: list[RegEvent], pair_weights: CoactivationWeights) -> Tensor:
        """Eq-style pairwise pull at every insertion event, averaged over events
        so the weight keeps one scale across depths and task counts."""
        terms = []
        for ev in events:
            if len(ev.adapter_ids) < 2:
                continue
            sub = pair_weights.beta[np.ix_(ev.adapter_ids, ev.adapter_ids)]
            terms.append(consistency_reg(list(ev.pooled), CoactivationWeights(sub)))
        if not terms:
            return Tensor.zeros(1, 1)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total.scale(1.0 / len(events)) if events else total

    # -- parameters -----------------------------------------------------------

    def parameters(self, include_backbone: bool = True) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if include_backbone:
            out.extend(self.backbone.parameters())
        out.extend(self.bank.parameters())
        out.append(("routing.relation", self.relation.scores))
        for t, (w, b) in enumerate(self.heads):
            out.append((f"head.{t}.w", w))
            out.append((f"head.{t}.b", b))
        return out

    def count_params(self) -> ParamCounts:
        head_params = sum(w.data.size + b.data.size for w, b in self.heads)
        fine = self.bank.param_count() + self.relation.scores.data.size + head_params
        backbone_params = self.backbone.param_count()
        trainable = fine if self.backbone.frozen else fine + backbone_params
        return ParamCounts(trainable=trainable, total=fine + backbone_params)

    def config_dict(self) -> dict[str, str]:
        return {
            "d_in": str(self.backbone.d_in),
            "d_hidden": str(self.backbone.d_hidden),
            "depth": str(self.backbone.depth),
            "num_tasks": str(self.num_tasks),
            "num_adapters": str(self.num_adapters),
            "rank": str(next(iter(self.bank.adapters.values()))[0].rank),
            "insertion_layers": ",".join(str(l) for l in self.insertion_layers),
            "inner_relu": str(int(self.bank.inner_relu)),
            "temperature": repr(self.routing_cfg.temperature),
            "threshold": repr(self.routing_cfg.threshold),
            "backbone_frozen": str(int(self.backbone.frozen)),
        }
