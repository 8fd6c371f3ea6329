"""Spatial-domain adaptation: freezing plans and low-rank adapters."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .backbone import POLICIES, ModelConfig
from .tensor import Tensor, ops

_UNIT_RE = re.compile(r"^groups\.(\d+)\.units\.(\d+)\.")
_GROUP_RE = re.compile(r"^groups\.(\d+)\.")


@dataclass
class LoraAdapter:
    """Trainable low-rank residual ``scale * down @ up`` on a frozen linear."""

    down: Tensor  # [Din, r]
    up: Tensor  # [r, Dout]
    scale: float

    def __post_init__(self):
        din, r = self.down.shape
        r2, _ = self.up.shape
        if r != r2:
            raise ValueError(f"adapter rank mismatch: down has {r}, up has {r2}")
        if r >= din:
            raise ValueError(f"adapter rank {r} must be smaller than input dim {din}")

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @property
    def numel(self) -> int:
        return self.down.size + self.up.size

    @classmethod
    def create(cls, din: int, dout: int, rank: int, alpha: float, rng: np.random.Generator,
               dtype=np.float32) -> LoraAdapter:
        down = Tensor((rng.standard_normal((din, rank)) * 0.02).astype(dtype))
        up = Tensor(np.zeros((rank, dout), dtype=dtype))
        return cls(down, up, alpha / rank)


def lora_forward(x: Tensor, base_weight: Tensor, base_bias: Tensor | None, adapter: LoraAdapter) -> Tensor:
    """``x @ W + b + scale * (x @ down) @ up``."""
    if adapter.down.shape[0] != base_weight.shape[0] or adapter.up.shape[1] != base_weight.shape[1]:
        raise ValueError(
            f"adapter {adapter.down.shape}x{adapter.up.shape} does not fit weight {base_weight.shape}"
        )
    base = ops.linear(x, base_weight, base_bias)
    delta = ops.linear(ops.linear(x, adapter.down), adapter.up)
    return base + delta * adapter.scale


def merge_lora(base_weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter into a plain weight ``W + scale * down @ up``."""
    delta = (adapter.down.data @ adapter.up.data) * adapter.scale
    return Tensor((base_weight.data + delta).astype(base_weight.dtype, copy=False))


@dataclass(frozen=True)
class FreezePlan:
    policy: str
    budget: int
    frozen: frozenset[str]
    trainable: frozenset[str]
    lora_targets: frozenset[str]

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen


def _frozen_by_policy(name: str, cfg: ModelConfig, policy: str, budget: int) -> bool:
    if budget == 0:
        return False
    if name.startswith("head."):
        return True
    if policy == "shallow_groups":
        m = _GROUP_RE.match(name)
        return bool(m) and int(m.group(1)) < budget
    m = _UNIT_RE.match(name)
    if not m:
        return False
    unit = int(m.group(2))
    if policy == "shallow_units_per_group":
        return unit < budget
    return unit >= cfg.n_units - budget  # deep_units_per_group


def apply_freeze_plan(param_names: Iterable[str], cfg: ModelConfig, policy: str = "shallow_units_per_group",
                      budget: int | None = None) -> FreezePlan:
    """Classify every backbone parameter as frozen or trainable.

    ``budget`` is the number of frozen units per group for the two per-group
    policies (default ``cfg.m_sta``) and the number of frozen leading groups
    for ``shallow_groups``. A zero budget freezes nothing, which is plain
    full fine-tuning. Any positive budget also freezes the conv head. LoRA
    targets are the q and v linears of frozen units when ``cfg.rank > 0``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; expected one of {POLICIES}")
    if budget is None:
        budget = cfg.m_sta
    limit = cfg.n_groups if policy == "shallow_groups" else cfg.n_units
    if not 0 <= budget <= limit:
        raise ValueError(f"budget {budget} out of range [0, {limit}] for policy {policy}")
    names = [n for n in param_names if not n.startswith("fda.") and ".lora." not in n]
    frozen = {n for n in names if _frozen_by_policy(n, cfg, policy, budget)}
    trainable = set(names) - frozen
    targets = set()
    if cfg.rank > 0:
        for n in frozen:
            if _UNIT_RE.match(n) and (n.endswith(".q.weight") or n.endswith(".v.weight")):
                targets.add(n[: -len(".weight")])
    return FreezePlan(policy, budget, frozenset(frozen), frozenset(trainable), frozenset(targets))


def full_finetune_plan(param_names: Iterable[str], cfg: ModelConfig) -> FreezePlan:
    return apply_freeze_plan(param_names, cfg, "shallow_units_per_group", 0)


def create_adapters(plan: FreezePlan, params: Mapping[str, Tensor], cfg: ModelConfig,
                    rng: np.random.Generator) -> dict[str, LoraAdapter]:
    adapters = {}
    for target in sorted(plan.lora_targets):
        din, dout = params[f"{target}.weight"].shape
        adapters[target] = LoraAdapter.create(din, dout, cfg.rank, cfg.alpha, rng,
                                              params[f"{target}.weight"].dtype)
    return adapters


def _numel(v) -> int:
    if isinstance(v, Tensor):
        return v.size
    if isinstance(v, np.ndarray):
        return v.size
    return int(np.prod(v))


def count_trainable(plan: FreezePlan, params: Mapping[str, object],
                    adapters: Mapping[str, object] | None = None,
                    fda_params: Mapping[str, object] | None = None) -> dict:
    """Exact parameter ledger.

    ``params`` maps backbone names to tensors or shapes; adapters map target
    names to :class:`LoraAdapter` or to ``(din, dout, rank)`` tuples.
    ``total`` counts backbone plus adapter parameters, so ``trainable +
    frozen == total``. ``fraction_vs_ft`` divides the trainable count by the
    backbone size, which is what full fine-tuning trains. FDA parameters are
    reported separately.
    """
    total = frozen = 0
    for name, v in params.items():
        if name.startswith("fda.") or ".lora." in name:
            continue
        n = _numel(v)
        total += n
        if name in plan.frozen:
            frozen += n
        elif name not in plan.trainable:
            raise KeyError(f"parameter {name!r} is not classified by the freeze plan")
    lora = 0
    for target, a in (adapters or {}).items():
        if target not in plan.lora_targets:
            raise KeyError(f"adapter on {target!r} is not a LoRA target of the plan")
        if isinstance(a, LoraAdapter):
            lora += a.numel
        else:
            din, dout, r = a
            lora += r * (din + dout)
    backbone = total
    trainable = backbone - frozen + lora
    ledger = {
        "total": backbone + lora,
        "trainable": trainable,
        "frozen": frozen,
        "lora": lora,
        "ft_trainable": backbone,
        "fraction_vs_ft": trainable / backbone if backbone else 0.0,
    }
    if fda_params is not None:
        fda = sum(_numel(v) for v in fda_params.values())
        ledger["fda"] = fda
        ledger["trainable_with_fda"] = trainable + fda
    return ledger
