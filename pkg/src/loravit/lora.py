"""Low-rank adapters for the attention query/key projections.

Each adapter carries a down-projection (D, r), an up-projection (r, d)
and a fixed scalar scale s. The adapted projection computes
x @ w + s * ((x @ w_down) @ w_up) without materializing the dense
w_down @ w_up product; ``merge`` folds the product into the base weight
for adapter-free inference. Up-projections start at zero so a freshly
injected model is an exact no-op relative to the frozen backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError, ContractError, ShapeError


class Target(Enum):
    QUERY = "query"
    KEY = "key"


def parse_target(text: str) -> Target:
    for t in Target:
        if t.value == text.lower():
            return t
    raise ConfigError(f"unknown adapter target {text!r}; valid targets: query, key"
                      " (the value projection is never adapted)")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    scale: float = 1.0
    targets: tuple[Target, ...] = (Target.QUERY, Target.KEY)
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise ConfigError("adapter target set must not be empty")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate adapter targets")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")


class LoraAdapter:
    """One rank-r decomposition attached to a single projection matrix."""

    def __init__(self, block_index: int, target: Target, w_down: Parameter,
                 w_up: Parameter, scale: float):
        if not isinstance(target, Target):
            raise ContractError(
                f"adapter target must be query or key, got {target!r}"
            )
        d_in, r = w_down.tensor.shape
        r_up, d_out = w_up.tensor.shape
        if r != r_up:
            raise ShapeError(f"adapter factors disagree on rank: {r} vs {r_up}")
        if not 1 <= r < min(d_in, d_out):
            raise ConfigError(
                f"adapter rank must satisfy 1 <= r < min(D, d) = {min(d_in, d_out)}, got {r}"
            )
        self.block_index = block_index
        self.target = target
        self.w_down = w_down
        self.w_up = w_up
        self.scale = float(scale)
        self.rank = r

    @property
    def d_in(self) -> int:
        return self.w_down.tensor.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_up.tensor.shape[1]

    def parameters(self):
        return [self.w_down, self.w_up]


class AdapterSet:
    """At most one adapter per (block, target)."""

    def __init__(self):
        self._adapters: dict[tuple[int, Target], LoraAdapter] = {}

    def add(self, adapter: LoraAdapter):
        key = (adapter.block_index, adapter.target)
        if key in self._adapters:
            raise ContractError(f"duplicate adapter for block {key[0]} target {key[1].value}")
        self._adapters[key] = adapter

    def get(self, block_index: int, target: Target):
        return self._adapters.get((block_index, target))

    def query_adapter(self, block_index: int):
        return self.get(block_index, Target.QUERY)

    def key_adapter(self, block_index: int):
        return self.get(block_index, Target.KEY)

    def __len__(self):
        return len(self._adapters)

    def __iter__(self):
        return iter(sorted(self._adapters.values(), key=lambda a: (a.block_index, a.target.value)))

    def parameters(self):
        for adapter in self:
            yield from adapter.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def validate_against(self, cfg):
        for (block, _target), adapter in self._adapters.items():
            if not 0 <= block < cfg.depth:
                raise ContractError(f"adapter block index {block} out of range for depth {cfg.depth}")
            if adapter.d_in != cfg.embed_dim or adapter.d_out != cfg.embed_dim:
                raise ShapeError(
                    f"adapter dims ({adapter.d_in}, {adapter.d_out}) do not match embed_dim {cfg.embed_dim}"
                )

    def checkpoint_entries(self):
        entries = {}
        for adapter in self:
            prefix = f"lora.{adapter.block_index}.{adapter.target.value}"
            entries[f"{prefix}.w_down"] = adapter.w_down.tensor
            entries[f"{prefix}.w_up"] = adapter.w_up.tensor
            entries[f"{prefix}.scale"] = Tensor(
                np.asarray(adapter.scale, dtype=adapter.w_down.tensor.dtype))
        return entries


def freeze_backbone(model, train_head: bool = True):
    """Freeze every backbone parameter; the two head layers stay
    trainable unless ``train_head`` is False."""
    for name, p in model.named_parameters():
        p.trainable = train_head and name.startswith("head.")


def inject(model, cfg: LoraConfig, freeze_head: bool = False) -> AdapterSet:
    """Attach one adapter per block per target and set the trainable
    partition: adapters (and by default the head) train, everything
    else is frozen.

    Down-projections are normal(0, init_std); up-projections are zero,
    so outputs are untouched until the first optimizer step.
    """
    d = model.config.embed_dim
    if not 1 <= cfg.rank < d:
        raise ConfigError(f"adapter rank must satisfy 1 <= r < D = {d}, got {cfg.rank}")
    rng = np.random.default_rng(np.random.SeedSequence((model.config.seed, 0x10AA)))
    adapters = AdapterSet()
    for block in range(model.config.depth):
        for target in sorted(cfg.targets, key=lambda t: t.value):
            prefix = f"lora.{block}.{target.value}"
            w_down = Parameter(
                f"{prefix}.w_down",
                Tensor((rng.standard_normal((d, cfg.rank)) * cfg.init_std).astype(model.dtype)),
                trainable=True,
            )
            w_up = Parameter(
                f"{prefix}.w_up",
                Tensor(np.zeros((cfg.rank, d), dtype=model.dtype)),
                trainable=True,
            )
            adapters.add(LoraAdapter(block, target, w_down, w_up, cfg.scale))
    freeze_backbone(model, train_head=not freeze_head)
    return adapters


def adapted_projection(x: Tensor, w: Tensor, adapter: LoraAdapter) -> Tensor:
    """x @ w plus the scaled low-rank correction, kept factorized."""
    if x.shape[-1] != adapter.d_in or w.shape != (adapter.d_in, adapter.d_out):
        raise ShapeError(
            f"adapted_projection: x {tuple(x.shape)}, w {tuple(w.shape)} do not match"
            f" adapter dims ({adapter.d_in}, {adapter.d_out})"
        )
    base = ag.matmul(x, w)
    low = ag.matmul(ag.matmul(x, adapter.w_down.tensor), adapter.w_up.tensor)
    return ag.add(base, ag.scale(low, adapter.scale))


def merge(w: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter into a dense weight: w + s * (w_down @ w_up)."""
    if w.shape != (adapter.d_in, adapter.d_out):
        raise ShapeError(f"merge: weight shape {tuple(w.shape)} does not match adapter")
    delta = adapter.scale * (adapter.w_down.tensor.data @ adapter.w_up.tensor.data)
    if not delta.any():
        return Tensor(w.data.copy())
    return Tensor((w.data + delta).astype(w.dtype))


def merged_model(model, adapters: AdapterSet):
    """A copy of the model with all adapters folded into w_q/w_k."""
    from .vit import ModelState

    out = ModelState(model.config, model.dtype)
    merged_names = {}
    for adapter in adapters:
        proj = "w_q" if adapter.target is Target.QUERY else "w_k"
        merged_names[f"blocks.{adapter.block_index}.attn.{proj}"] = adapter
    for name, p in model.named_parameters():
        if name in merged_names:
            out.add(name, merge(p.tensor, merged_names[name]).data, p.trainable)
        else:
            out.add(name, p.tensor.data.copy(), p.trainable)
    return out


def projection_counts(d_in: int, d_out: int, rank: int) -> tuple[int, int]:
    """(adapter parameter count, dense parameter count) for one projection."""
    return rank * (d_in + d_out), d_in * d_out


@dataclass(frozen=True)
class ParamCountReport:
    trainable: int
    frozen: int
    per_projection_adapter: int
    per_projection_dense: int


def trainable_parameter_count(model, adapters: AdapterSet | None) -> ParamCountReport:
    """Tally trainable vs frozen parameter sizes across model and adapters."""
    trainable = sum(p.tensor.size for _, p in model.named_parameters() if p.trainable)
    frozen = sum(p.tensor.size for _, p in model.named_parameters() if not p.trainable)
    d = model.config.embed_dim
    per_adapter, per_dense = 0, d * d
    if adapters is not None and len(adapters):
        first = next(iter(adapters))
        per_adapter, per_dense = projection_counts(first.d_in, first.d_out, first.rank)
        for p in adapters.parameters():
            if p.trainable:
                trainable += p.tensor.size
            else:
                frozen += p.tensor.size
    return ParamCountReport(trainable, frozen, per_adapter, per_dense)


def adapters_from_entries(entries: dict[str, Tensor], dtype=np.float32) -> AdapterSet:
    """Rebuild an AdapterSet from checkpoint entries named
    lora.{block}.{target}.{w_down|w_up|scale}."""
    groups: dict[tuple[int, Target], dict[str, Tensor]] = {}
    for name, tensor in entries.items():
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "lora":
            raise ConfigError(f"malformed adapter entry name {name!r}")
        block = int(parts[1])
        target = parse_target(parts[2])
        field = parts[3]
        if field not in ("w_down", "w_up", "scale"):
            raise ConfigError(f"unknown adapter field {field!r} in {name!r}")
        groups.setdefault((block, target), {})[field] = tensor

    adapters = AdapterSet()
    for (block, target), fields in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        missing = {"w_down", "w_up", "scale"} - set(fields)
        if missing:
            raise ConfigError(
                f"adapter lora.{block}.{target.value} is missing fields {sorted(missing)}"
            )
        prefix = f"lora.{block}.{target.value}"
        w_down = Parameter(f"{prefix}.w_down",
                           Tensor(fields["w_down"].data.astype(dtype)), trainable=True)
        w_up = Parameter(f"{prefix}.w_up",
                         Tensor(fields["w_up"].data.astype(dtype)), trainable=True)
        adapters.add(LoraAdapter(block, target, w_down, w_up, fields["scale"].item()))
    return adapters
