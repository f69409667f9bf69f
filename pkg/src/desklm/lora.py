"""Low-rank adapters over the frozen projections, with runtime task switching.

A projection output is ``xW + s * (xA)B`` — always computed low-rank first;
the merged matrix ``W + s*A*B`` only exists in :func:`merge_adapter`, which
is the oracle the runtime strategies are tested against.

Three switching strategies, fixed at bank construction:

  * ``multi_graph``       — one forward closure per task, all sharing the
                            same base weights object; switching picks a
                            closure.
  * ``masked``            — a single forward computes the one-hot-weighted
                            sum over every adapter in the bank each step.
  * ``adapter_as_input``  — a single forward takes the active adapter's
                            factor tensors as explicit call inputs.

All adapters in a bank must share one rank (fixed placeholder shapes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, UnknownTaskError
from .model import DecodeSession, KvCache, LayerWeights, ModelWeights, forward

STRATEGIES = ("multi_graph", "masked", "adapter_as_input")

_SITE_MATS = {"q": ("a_q", "b_q"), "k": ("a_k", "b_k"),
              "v": ("a_v", "b_v"), "o": ("a_o", "b_o")}


@dataclass
class LoraLayer:
    a_q: np.ndarray  # (E, d)
    b_q: np.ndarray  # (d, L)
    a_k: np.ndarray
    b_k: np.ndarray
    a_v: np.ndarray
    b_v: np.ndarray
    a_o: np.ndarray  # (L, d)
    b_o: np.ndarray  # (d, E)


@dataclass
class LoraAdapter:
    task_id: str
    rank: int
    scale: float
    layers: list[LoraLayer]

    def __post_init__(self):
        for i, ll in enumerate(self.layers):
            for name in ("a_q", "a_k", "a_v", "a_o"):
                if getattr(ll, name).shape[1] != self.rank:
                    raise ShapeError(f"layer {i} {name} does not have rank {self.rank}")
            for name in ("b_q", "b_k", "b_v", "b_o"):
                if getattr(ll, name).shape[0] != self.rank:
                    raise ShapeError(f"layer {i} {name} does not have rank {self.rank}")

    def param_bytes(self) -> int:
        total = 0
        for ll in self.layers:
            for name in _SITE_MATS:
                a, b = _SITE_MATS[name]
                total += getattr(ll, a).nbytes + getattr(ll, b).nbytes
        return total


def apply_lora_projection(x, w, a, b, s: float):
    """xW + s*(xA)B, never materializing A@B."""
    x = np.asarray(x, np.float32)
    if x.shape[-1] != w.shape[0] or x.shape[-1] != a.shape[0] or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"non-conforming shapes x{x.shape} W{w.shape} A{a.shape} B{b.shape}")
    base = kernels.matmul(x, w)
    if s == 0.0:
        return base
    return base + np.float32(s) * kernels.matmul(kernels.matmul(x, a), b)


def adapter_delta(adapter: LoraAdapter, layer: int, site: str, x):
    """s*(xA)B for one projection site of one layer."""
    a_name, b_name = _SITE_MATS[site]
    ll = adapter.layers[layer]
    a, b = getattr(ll, a_name), getattr(ll, b_name)
    return np.float32(adapter.scale) * kernels.matmul(kernels.matmul(x, a), b)


def make_lora_delta(adapter: LoraAdapter):
    def delta(layer, site, x):
        return adapter_delta(adapter, layer, site, x)

    return delta


def merge_adapter(weights: ModelWeights, adapter: LoraAdapter) -> ModelWeights:
    """New weights with W' = W + s*A*B on all four projections per layer."""
    if len(adapter.layers) != len(weights.layers):
        raise ShapeError("adapter layer count does not match model")
    s = float(adapter.scale)
    merged = []
    for lw, ll in zip(weights.layers, adapter.layers):
        def fold(w, a, b):
            if w.shape != (a.shape[0], b.shape[1]):
                raise ShapeError(f"cannot merge {a.shape}x{b.shape} into {w.shape}")
            return (w.astype(np.float64) + s * (a.astype(np.float64) @ b.astype(np.float64))).astype(np.float32)

        merged.append(LayerWeights(
            attn_gain=lw.attn_gain, wq=fold(lw.wq, ll.a_q, ll.b_q),
            wk=fold(lw.wk, ll.a_k, ll.b_k), wv=fold(lw.wv, ll.a_v, ll.b_v),
            wo=fold(lw.wo, ll.a_o, ll.b_o), mlp_gain=lw.mlp_gain,
            w_up=lw.w_up, w_gate=lw.w_gate, w_down=lw.w_down,
        ))
    return ModelWeights(weights.config, weights.token_embedding, merged,
                        weights.final_gain, head=weights.head)


def zero_adapter_like(adapter: LoraAdapter, task_id: str = "_zero") -> LoraAdapter:
    """Placeholder with zero factors: forwards reduce to the base model."""
    layers = [LoraLayer(**{n: np.zeros_like(getattr(ll, n))
                           for n in ("a_q", "b_q", "a_k", "b_k",
                                     "a_v", "b_v", "a_o", "b_o")})
              for ll in adapter.layers]
    return LoraAdapter(task_id=task_id, rank=adapter.rank,
                       scale=adapter.scale, layers=layers)


class LoraBank:
    """Ordered adapter set with one active task and a fixed strategy."""

    def __init__(self, strategy: str):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; have {STRATEGIES}")
        self.strategy = strategy
        self.adapters: list[LoraAdapter] = []
        self.active_index: int | None = None

    def add(self, adapter: LoraAdapter):
        if self.adapters and adapter.rank != self.adapters[0].rank:
            raise ShapeError(
                f"bank rank is {self.adapters[0].rank}; adapter "
                f"{adapter.task_id!r} has rank {adapter.rank}")
        if any(a.task_id == adapter.task_id for a in self.adapters):
            raise ValueError(f"duplicate task id {adapter.task_id!r}")
        self.adapters.append(adapter)
        if self.active_index is None:
            self.active_index = 0
        return self

    @property
    def selector(self) -> np.ndarray:
        sel = np.zeros(len(self.adapters), dtype=np.float32)
        if self.active_index is not None:
            sel[self.active_index] = 1.0
        return sel

    @property
    def active(self) -> LoraAdapter:
        if self.active_index is None:
            raise UnknownTaskError("bank is empty")
        return self.adapters[self.active_index]

    def task_ids(self):
        return [a.task_id for a in self.adapters]

    def switch_task(self, task_id: str):
        for i, a in enumerate(self.adapters):
            if a.task_id == task_id:
                self.active_index = i
                return self
        raise UnknownTaskError(task_id)

    def deactivate(self):
        """All-zero selector: masked forwards reduce to the base model."""
        self.active_index = None
        return self


def switch_task(bank: LoraBank, task_id: str):
    bank.switch_task(task_id)


class StrategyRunner:
    """Executes forwards for a bank under its strategy over fixed base weights."""

    def __init__(self, bank: LoraBank, weights: ModelWeights):
        self.bank = bank
        self.weights = weights
        if bank.strategy == "multi_graph":
            # one closure per task; every closure closes over the same
            # weights object (shared storage, no copies)
            self._runners = {
                a.task_id: self._make_runner(a) for a in bank.adapters
            }

    def _make_runner(self, adapter):
        weights = self.weights
        delta = make_lora_delta(adapter)

        def run(tokens, cache, mask, **kw):
            return forward(weights, tokens, cache, mask, lora_delta=delta, **kw)

        run.base_weights = weights
        return run

    def _masked_delta(self, layer, site, x):
        sel = self.bank.selector
        total = None
        for coef, adapter in zip(sel, self.bank.adapters):
            term = np.float32(coef) * adapter_delta(adapter, layer, site, x)
            total = term if total is None else total + term
        return total

    def lora_delta(self):
        """The active per-site delta under this strategy (None for base)."""
        if self.bank.strategy == "masked":
            return self._masked_delta
        return make_lora_delta(self.bank.active)

    def forward(self, tokens, cache, mask, **kw):
        if self.bank.strategy == "multi_graph":
            return self._runners[self.bank.active.task_id](tokens, cache, mask, **kw)
        if self.bank.strategy == "masked":
            return forward(self.weights, tokens, cache, mask,
                           lora_delta=self._masked_delta, **kw)
        # adapter_as_input: factors travel as explicit call arguments
        active = self.bank.active
        factors = [
            {name: getattr(ll, name) for name in
             ("a_q", "b_q", "a_k", "b_k", "a_v", "b_v", "a_o", "b_o")}
            for ll in active.layers
        ]
        return forward_adapter_inputs(self.weights, factors, active.scale,
                                      tokens, cache, mask, **kw)

    def session(self, layout="k_plain") -> DecodeSession:
        return DecodeSession(self.weights, layout=layout, lora_delta=self.lora_delta())


def forward_adapter_inputs(weights: ModelWeights, factors, scale, tokens,
                           cache, mask, **kw):
    """Single forward routine taking adapter factor tensors as inputs.

    ``factors`` is a per-layer list of dicts with keys a_q..b_o; zero-filled
    tensors reproduce the base model.
    """
    s = np.float32(scale)

    def delta(layer, site, x):
        a_name, b_name = _SITE_MATS[site]
        f = factors[layer]
        return s * kernels.matmul(kernels.matmul(x, f[a_name]), f[b_name])

    return forward(weights, tokens, cache, mask, lora_delta=delta, **kw)


def forward_with_strategy(bank: LoraBank, weights: ModelWeights, tokens,
                          cache: KvCache, mask, **kw):
    return StrategyRunner(bank, weights).forward(tokens, cache, mask, **kw)


@dataclass
class FootprintReport:
    strategy: str
    n_adapters: int
    base_param_bytes: int
    adapter_param_bytes: int      # one adapter
    param_storage_bytes: int      # resident parameters
    step_touched_bytes: int       # parameter bytes read per decode step
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "strategy": self.strategy, "n_adapters": self.n_adapters,
            "base_param_bytes": self.base_param_bytes,
            "adapter_param_bytes": self.adapter_param_bytes,
            "param_storage_bytes": self.param_storage_bytes,
            "step_touched_bytes": self.step_touched_bytes,
            "breakdown": self.breakdown,
        }


def strategy_footprint(bank: LoraBank, weights: ModelWeights) -> FootprintReport:
    """Deterministic byte accounting from shapes.

    Per decode step the base weights are always read once; the masked
    strategy additionally reads every adapter in the bank (the one-hot sum
    touches them all), while the other two read only the active adapter.
    """
    base = sum(t.nbytes for t in weights.all_tensors().values())
    per_adapter = bank.adapters[0].param_bytes() if bank.adapters else 0
    n = len(bank.adapters)
    storage = base + n * per_adapter
    touched_adapters = n if bank.strategy == "masked" else min(n, 1)
    report = FootprintReport(
        strategy=bank.strategy, n_adapters=n, base_param_bytes=base,
        adapter_param_bytes=per_adapter, param_storage_bytes=storage,
        step_touched_bytes=base + touched_adapters * per_adapter,
        breakdown={
            "base": base,
            "adapters": {a.task_id: a.param_bytes() for a in bank.adapters},
        },
    )
    return report
