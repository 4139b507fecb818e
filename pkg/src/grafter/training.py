"""Mini-batch training loop, optimizers, and per-epoch metrics rows."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .graphs import make_batch, mean_pool
from .metrics import ComputeCounter, average_precision, awa
from .model import ComposedGcn
from .objectives import ObjectiveConfig
from .routing import route
from .tensor import Tape, Tensor, add_bias, masked_bce_mean, matmul

Array = np.ndarray

OPTIMIZERS = ("sgd", "adam")

METRICS_HEADER = (
    "epoch,l_task,l_reg,l_rel,l_total,ap_mean,awa,active_adapters_mean,trainable_params,epoch_ms"
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 3e-3
    seed: int = 0
    optimizer: str = "adam"
    freeze_backbone: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        # zero is allowed so a zero step is a testable no-op
        if self.learning_rate < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    l_task: float
    l_reg: float
    l_rel: float
    l_total: float
    ap_mean: float
    awa: float | None
    active_adapters_mean: float
    trainable_params: int
    epoch_ms: float

    def csv_cells(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.l_task),
            repr(self.l_reg),
            repr(self.l_rel),
            repr(self.l_total),
            repr(self.ap_mean),
            "" if self.awa is None else repr(self.awa),
            repr(self.active_adapters_mean),
            str(self.trainable_params),
            f"{self.epoch_ms:.3f}",
        ]


def metrics_csv_lines(rows) -> list[str]:
    return [METRICS_HEADER] + [",".join(r.csv_cells()) for r in rows]


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    diverged: bool


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params) -> None:
        for _, p in params:
            if p.grad is not None:
                p.data -= self.learning_rate * p.grad


class Adam:
    """Adaptive moments with bias correction. A missing gradient counts as
    zero, so the moment decay stays deterministic."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}

    def step(self, params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else Sgd(cfg.learning_rate)


def zero_grads(params) -> None:
    for _, p in params:
        p.grad = None


def predict_scores(model: ComposedGcn, graphs, chunk_size: int = 8) -> Array:
    """Forward without a tape, in small chunks so the dense block-diagonal
    system stays small. Returns raw logits [G x T]; AP only needs the order."""
    if not graphs:
        raise ContractError("predict_scores: no graphs")
    parts = []
    for lo in range(0, len(graphs), chunk_size):
        batch = make_batch(graphs[lo : lo + chunk_size])
        parts.append(model.forward(batch).logits.data)
    return np.vstack(parts)


def evaluate(model: ComposedGcn, graphs, cluster_map=None, chunk_size: int = 8,
             counter: ComputeCounter | None = None):
    """Held-out AP (and AWA when the planted clusters are known)."""
    if counter is not None:
        # count one scoring pass deterministically
        parts = []
        for lo in range(0, len(graphs), chunk_size):
            batch = make_batch(graphs[lo : lo + chunk_size])
            parts.append(model.forward(batch, counter).logits.data)
        scores = np.vstack(parts)
    else:
        scores = predict_scores(model, graphs, chunk_size)
    y = np.stack([g.y for g in graphs])
    mask = ~np.isnan(y)
    labels = np.where(mask, y, 0.0)
    ap = average_precision(scores, labels, mask)
    outcome = route(model.relation, model.routing_cfg)
    allocation = None if cluster_map is None else awa(outcome, cluster_map)
    return ap, allocation, outcome


def train(
    model: ComposedGcn,
    train_graphs,
    cfg: TrainConfig,
    *,
    eval_graphs=None,
    cluster_map=None,
    objective: ObjectiveConfig | None = None,
    counter: ComputeCounter | None = None,
) -> TrainResult:
    """Run mini-batch descent on the combined loss, one MetricsRow per epoch.

    The backbone is frozen by default: its weights stop requiring gradients
    and never reach the optimizer. On a non-finite loss the loop aborts and
    returns the rows finished so far with ``diverged`` set.
    """
    if not train_graphs:
        raise ContractError("train: no training graphs")
    objective = objective or ObjectiveConfig()
    model.backbone.set_frozen(cfg.freeze_backbone)
    params = model.parameters(include_backbone=not cfg.freeze_backbone)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng([cfg.seed, 929])
    held_out = eval_graphs if eval_graphs else train_graphs
    trainable = model.count_params().trainable

    rows: list[MetricsRow] = []
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(len(train_graphs))
        sums = np.zeros(3)
        steps = 0
        try:
            for lo in range(0, len(order), cfg.batch_size):
                batch = make_batch([train_graphs[i] for i in order[lo : lo + cfg.batch_size]])
                with Tape() as tape:
                    fwd = model.forward(batch, counter)
                    total, report = model.loss(fwd, batch, objective)
                    tape.backward(total)
                opt.step(params)
                zero_grads(params)
                sums += (report.task, report.consistency, report.relation)
                steps += 1
            l_task, l_reg, l_rel = sums / steps
            l_total = l_task + objective.consistency_weight * l_reg + objective.relation_weight * l_rel
            # a step can push weights non-finite without tripping its own
            # forward pass, so the held-out pass sits inside the same guard
            ap, allocation, outcome = evaluate(model, held_out, cluster_map)
        except NumericError:
            diverged = True
            break
        active_mean = float(outcome.active.sum(axis=1).mean())
        rows.append(
            MetricsRow(
                epoch=epoch,
                l_task=float(l_task),
                l_reg=float(l_reg),
                l_rel=float(l_rel),
                l_total=float(l_total),
                ap_mean=ap.mean,
                awa=allocation,
                active_adapters_mean=active_mean,
                trainable_params=trainable,
                epoch_ms=(time.monotonic() - t0) * 1000.0,
            )
        )
    return TrainResult(rows=rows, diverged=diverged)


def pretrain_backbone(
    backbone,
    graphs,
    num_tasks: int,
    *,
    epochs: int = 15,
    learning_rate: float = 1e-2,
    batch_size: int = 16,
    seed: int = 0,
) -> None:
    """Pretext phase standing in for a released pre-trained model: fit the
    bare stack plus a throwaway pooled head on all tasks at once, then discard
    the head. Call once, then freeze the backbone for fine-tuning."""
    if epochs < 1:
        return
    backbone.set_frozen(False)
    rng = np.random.default_rng([seed, 101])
    bound = np.sqrt(6.0 / (backbone.d_hidden + num_tasks))
    w = Tensor(rng.uniform(-bound, bound, size=(backbone.d_hidden, num_tasks)), requires_grad=True)
    b = Tensor.zeros(1, num_tasks, requires_grad=True)
    params = backbone.parameters() + [("pretext.w", w), ("pretext.b", b)]
    opt = Adam(learning_rate)
    shuffle = np.random.default_rng([seed, 131])
    for _ in range(epochs):
        order = shuffle.permutation(len(graphs))
        for lo in range(0, len(order), batch_size):
            batch = make_batch([graphs[i] for i in order[lo : lo + batch_size]])
            with Tape() as tape:
                h = backbone.forward(batch.a_hat, batch.x)
                pooled = mean_pool(h, batch.segment_ids, batch.num_graphs)
                logits = add_bias(matmul(pooled, w), b)
                loss = masked_bce_mean(logits, batch.y, batch.mask)
                tape.backward(loss)
            opt.step(params)
            zero_grads(params)
