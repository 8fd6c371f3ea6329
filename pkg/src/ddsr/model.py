"""Dual-domain network: backbone, optional LoRA adapters, optional FDA branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .adaptation import FreezePlan, LoraAdapter, apply_freeze_plan, count_trainable, create_adapters, merge_lora
from .backbone import BackboneActivations, ModelConfig, backbone_forward, backbone_param_shapes, init_params
from .fda import FdaState, fda_forward, fda_param_shapes
from .spectral import ComplexSpectrum
from .tensor import Tensor, no_grad

REGIMES = ("pretrain", "ret", "ft", "dan-p", "dan-f")

# independent RNG streams so that e.g. the LoRA rank does not perturb FDA init
_STREAM_BACKBONE, _STREAM_LORA, _STREAM_FDA = 0, 1, 2


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class ModelOutput:
    o_s: Tensor
    o_f: ComplexSpectrum | None
    o: Tensor | None
    backbone: BackboneActivations
    fda: FdaState | None

    @property
    def prediction(self) -> Tensor:
        """Scored output: O when the FDA branch exists, O^s otherwise."""
        return self.o if self.o is not None else self.o_s


class DualDomainNet:
    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor],
                 adapters: Mapping[str, LoraAdapter] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = dict(params)
        self.adapters: dict[str, LoraAdapter] = dict(adapters or {})
        names = [n for n in self.params if not n.startswith("fda.")]
        self.plan: FreezePlan = apply_freeze_plan(names, config, config.policy_name, config.m_sta)
        missing = set(self.plan.lora_targets) - set(self.adapters) if config.rank else set()
        if missing:
            raise ValueError(f"missing LoRA adapters for {sorted(missing)[:3]}...")

    # -- construction -------------------------------------------------------
    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, dtype=np.float32) -> DualDomainNet:
        params = init_params(backbone_param_shapes(config), _rng(seed, _STREAM_BACKBONE), dtype)
        if config.use_fda:
            params.update(init_params(fda_param_shapes(config), _rng(seed, _STREAM_FDA), dtype))
        net = cls.__new__(cls)
        net.config = config
        net.params = params
        names = [n for n in params if not n.startswith("fda.")]
        net.plan = apply_freeze_plan(names, config, config.policy_name, config.m_sta)
        net.adapters = create_adapters(net.plan, params, config, _rng(seed, _STREAM_LORA))
        return net

    @classmethod
    def from_pretrained(cls, source: DualDomainNet, config: ModelConfig, seed: int) -> DualDomainNet:
        """Copy backbone weights from ``source`` and attach fresh adapters / FDA per ``config``."""
        base_keys = backbone_param_shapes(config)
        src_shapes = {k: v.shape for k, v in source.backbone_params().items()}
        if src_shapes != dict(base_keys):
            raise ValueError("source checkpoint backbone is not compatible with the requested config")
        if source.adapters:
            source = source.merged()
        params = {k: Tensor(source.params[k].data.copy()) for k in base_keys}
        dtype = next(iter(params.values())).dtype
        if config.use_fda:
            params.update(init_params(fda_param_shapes(config), _rng(seed, _STREAM_FDA), dtype))
        net = cls.__new__(cls)
        net.config = config
        net.params = params
        net.plan = apply_freeze_plan(list(base_keys), config, config.policy_name, config.m_sta)
        net.adapters = create_adapters(net.plan, params, config, _rng(seed, _STREAM_LORA))
        return net

    # -- parameter views ------------------------------------------------------
    def backbone_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("fda.")}

    def fda_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("fda.")}

    def named_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor, adapters under ``<target>.lora.down`` / ``.lora.up``."""
        out = dict(self.params)
        for target, a in self.adapters.items():
            out[f"{target}.lora.down"] = a.down
            out[f"{target}.lora.up"] = a.up
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if k not in self.plan.frozen}

    def frozen_params(self) -> dict[str, Tensor]:
        return {k: self.params[k] for k in sorted(self.plan.frozen)}

    def ledger(self) -> dict:
        return count_trainable(self.plan, self.backbone_params(), self.adapters, self.fda_params())

    def merged(self) -> DualDomainNet:
        """Equivalent network with adapters folded into the base weights."""
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        for target, a in self.adapters.items():
            params[f"{target}.weight"] = merge_lora(self.params[f"{target}.weight"], a)
        return DualDomainNet(self.config.replace(rank=0), params)

    def astype(self, dtype) -> DualDomainNet:
        net = DualDomainNet.__new__(DualDomainNet)
        net.config = self.config
        net.params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        net.adapters = {k: LoraAdapter(Tensor(a.down.data.astype(dtype)), Tensor(a.up.data.astype(dtype)), a.scale)
                        for k, a in self.adapters.items()}
        net.plan = self.plan
        return net

    # -- forward --------------------------------------------------------------
    def forward(self, x: Tensor) -> ModelOutput:
        acts = backbone_forward(x, self.params, self.config, self.adapters)
        if not self.config.use_fda:
            return ModelOutput(acts.output, None, None, acts, None)
        o, state = fda_forward(x, acts.groups, acts.penultimate_hr, self.params, self.config)
        return ModelOutput(acts.output, state.spectrum, o, acts, state)

    __call__ = forward

    def predict(self, lr: np.ndarray, batch: int = 8) -> tuple[np.ndarray, np.ndarray | None]:
        """Inference on ``[N, c, h, w]`` arrays; returns ``(O^s, O or None)``."""
        dtype = next(iter(self.params.values())).dtype
        outs_s, outs_o = [], []
        with no_grad():
            for i in range(0, len(lr), batch):
                res = self.forward(Tensor(np.asarray(lr[i:i + batch], dtype=dtype)))
                outs_s.append(res.o_s.data)
                if res.o is not None:
                    outs_o.append(res.o.data)
        return np.concatenate(outs_s), (np.concatenate(outs_o) if outs_o else None)
