"""Low-rank residual adapters and the per-layer adapter bank."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, matmul

# rank must stay well below width; ratio is configurable on the bank
DEFAULT_MAX_RANK_RATIO = 0.25


class AdapterParams:
    """One adapter: a width x rank down map ``u`` and rank x width up map ``v``.

    ``v`` starts at zero so a fresh adapter is exactly the identity; only
    training moves it off the residual path.
    """

    def __init__(self, u: Tensor, v: Tensor, adapter_id: int):
        if u.cols != v.rows:
            raise DimensionError(f"adapter rank mismatch: u {u.shape} vs v {v.shape}")
        if u.rows != v.cols:
            raise DimensionError(f"adapter width mismatch: u {u.shape} vs v {v.shape}")
        if u.cols < 1:
            raise ContractError("adapter rank must be >= 1")
        self.u = u
        self.v = v
        self.adapter_id = adapter_id

    @classmethod
    def init(cls, width: int, rank: int, adapter_id: int, rng: np.random.Generator) -> "AdapterParams":
        bound = np.sqrt(6.0 / (width + rank))
        u = Tensor(rng.uniform(-bound, bound, size=(width, rank)), requires_grad=True)
        v = Tensor(np.zeros((rank, width)), requires_grad=True)
        return cls(u, v, adapter_id)

    @property
    def width(self) -> int:
        return self.u.rows

    @property
    def rank(self) -> int:
        return self.u.cols

    def param_count(self) -> int:
        return 2 * self.width * self.rank


def adapter_forward(params: AdapterParams, z: Tensor, inner_relu: bool = False) -> Tensor:
    """z + (z @ u) @ v; with ``inner_relu``, z + relu(z @ u) @ v (ablation)."""
    if z.cols != params.width:
        raise DimensionError(f"adapter width {params.width} cannot take states {z.shape}")
    low = matmul(z, params.u)
    if inner_relu:
        low = low.relu()
    return z + matmul(low, params.v)


class AdapterBank:
    """k adapters per insertion layer, all the same width and rank."""

    def __init__(self, adapters: dict[int, list[AdapterParams]], inner_relu: bool = False):
        if not adapters:
            raise ContractError("adapter bank needs at least one insertion layer")
        counts = {len(v) for v in adapters.values()}
        if len(counts) != 1:
            raise ContractError("every insertion layer must hold the same number of adapters")
        self.adapters = adapters
        self.inner_relu = inner_relu

    @classmethod
    def build(
        cls,
        layers,
        width: int,
        num_adapters: int,
        rank: int,
        seed: int,
        inner_relu: bool = False,
        max_rank_ratio: float = DEFAULT_MAX_RANK_RATIO,
    ) -> "AdapterBank":
        layers = tuple(layers)
        if not layers:
            raise ContractError("adapter bank needs at least one insertion layer")
        if num_adapters < 1:
            raise ContractError(f"need at least one adapter, got {num_adapters}")
        if rank < 1:
            raise ContractError(f"adapter rank must be >= 1, got {rank}")
        if rank > width * max_rank_ratio:
            raise ContractError(
                f"rank {rank} too large for width {width} (limit {width * max_rank_ratio:g})"
            )
        rng = np.random.default_rng([seed, 23])
        adapters = {
            l: [AdapterParams.init(width, rank, i, rng) for i in range(num_adapters)]
            for l in layers
        }
        return cls(adapters, inner_relu=inner_relu)

    @property
    def num_adapters(self) -> int:
        return len(next(iter(self.adapters.values())))

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.adapters))

    def at(self, layer: int) -> list[AdapterParams]:
        if layer not in self.adapters:
            raise ContractError(f"no adapters at layer {layer}; bank covers {self.layers}")
        return self.adapters[layer]

    def forward_selected(self, layer: int, z: Tensor, ids, counter=None) -> list[tuple[int, Tensor]]:
        """Run only the requested adapters; the counter tracks the evals."""
        params = self.at(layer)
        out = []
        for i in ids:
            if not 0 <= i < len(params):
                raise ContractError(f"adapter id {i} out of range at layer {layer}")
            if counter is not None:
                counter.adapter_evals += 1
            out.append((i, adapter_forward(params[i], z, self.inner_relu)))
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            for p in self.adapters[layer]:
                out.append((f"adapter.{layer}.{p.adapter_id}.u", p.u))
                out.append((f"adapter.{layer}.{p.adapter_id}.v", p.v))
        return out

    def param_count(self) -> int:
        return sum(p.param_count() for ps in self.adapters.values() for p in ps)


def bank_forward(bank: AdapterBank, layer: int, z: Tensor) -> list[Tensor]:
    """All k adapter outputs at one layer, in adapter order."""
    return [out for _, out in bank.forward_selected(layer, z, range(bank.num_adapters))]
