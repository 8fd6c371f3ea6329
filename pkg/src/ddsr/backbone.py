"""Windowed-attention SR backbone producing the spatial-domain output.

Layout: conv head -> N groups of M attention units (each group closed by a
3x3 conv and a residual) -> global residual ``F0 + F_N`` -> upsampler
(conv, LeakyReLU, conv + pixel-shuffle stages, penultimate conv, output conv).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .tensor import Tensor, ops, trunc_normal

SUPPORTED_SCALES = {2: (2,), 3: (3,), 4: (2, 2), 8: (2, 2, 2)}
POLICIES = ("shallow_units_per_group", "shallow_groups", "deep_units_per_group")


@dataclass(frozen=True)
class ModelConfig:
    n_groups: int = 2
    n_units: int = 6
    dim: int = 32
    window: int = 4
    scale: int = 2
    channels: int = 3
    m_sta: int = 5
    rank: int = 4
    alpha: int = 4
    fda_dim: int = 16
    n_fda: int = 2
    up_dim: int = 8
    mlp_ratio: int = 2
    use_fda: int = 0
    policy: int = 0  # index into POLICIES

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"unsupported scale {self.scale}; choose from {sorted(SUPPORTED_SCALES)}")
        if not 0 <= self.m_sta <= self.n_units:
            raise ValueError(f"m_sta={self.m_sta} outside [0, {self.n_units}]")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.rank and self.rank >= self.dim:
            raise ValueError(f"LoRA rank {self.rank} must be smaller than dim {self.dim}")
        if not 0 <= self.n_fda <= self.n_groups:
            raise ValueError(f"n_fda={self.n_fda} outside [0, {self.n_groups}]")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if min(self.n_groups, self.n_units, self.dim, self.channels, self.fda_dim, self.up_dim) < 1:
            raise ValueError("sizes must be positive")
        if not 0 <= self.policy < len(POLICIES):
            raise ValueError(f"policy code {self.policy} unknown")

    @property
    def lora_scale(self) -> float:
        return self.alpha / self.rank if self.rank else 0.0

    @property
    def policy_name(self) -> str:
        return POLICIES[self.policy]

    def replace(self, **kw) -> ModelConfig:
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PAPER_CONFIG = ModelConfig(n_groups=6, n_units=6, dim=180, window=8, scale=4, m_sta=5, rank=4,
                           alpha=4, fda_dim=64, n_fda=6, up_dim=64)
DESK_CONFIG = ModelConfig()


def unit_param_shapes(prefix: str, d: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    h = d * mlp_ratio
    shapes = {f"{prefix}.ln1.gamma": (d,), f"{prefix}.ln1.beta": (d,)}
    for lin in ("q", "k", "v", "out"):
        shapes[f"{prefix}.{lin}.weight"] = (d, d)
        shapes[f"{prefix}.{lin}.bias"] = (d,)
    shapes.update({
        f"{prefix}.ln2.gamma": (d,), f"{prefix}.ln2.beta": (d,),
        f"{prefix}.ffn1.weight": (d, h), f"{prefix}.ffn1.bias": (h,),
        f"{prefix}.ffn2.weight": (h, d), f"{prefix}.ffn2.bias": (d,),
    })
    return shapes


def _conv_shapes(name: str, cout: int, cin: int, k: int = 3) -> dict[str, tuple[int, ...]]:
    return {f"{name}.weight": (cout, cin, k, k), f"{name}.bias": (cout,)}


def backbone_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table of every backbone parameter."""
    d, u, c = cfg.dim, cfg.up_dim, cfg.channels
    shapes = _conv_shapes("head", d, c)
    for g in range(cfg.n_groups):
        for m in range(cfg.n_units):
            shapes.update(unit_param_shapes(f"groups.{g}.units.{m}", d, cfg.mlp_ratio))
        shapes.update(_conv_shapes(f"groups.{g}.conv", d, d))
    shapes.update(_conv_shapes("up.conv_before", u, d))
    for i, s in enumerate(SUPPORTED_SCALES[cfg.scale]):
        shapes.update(_conv_shapes(f"up.stages.{i}", u * s * s, u))
    shapes.update(_conv_shapes("up.penult", u, u))
    shapes.update(_conv_shapes("up.out", c, u))
    return shapes


def init_params(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """Linear weights ~ truncated normal(0, 0.02), conv kernels scaled by 1/sqrt(fan_in).

    Biases and LN shifts start at zero, LN scales at one.
    """
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias") or name.endswith(".beta"):
            arr = np.zeros(shape, dtype=dtype)
        elif len(shape) == 4:
            arr = trunc_normal(rng, shape, 1.0 / np.sqrt(np.prod(shape[1:])), dtype)
        else:
            arr = trunc_normal(rng, shape, 0.02, dtype)
        params[name] = Tensor(arr)
    return params


# -- windows -----------------------------------------------------------------

@dataclass(frozen=True)
class WindowLayout:
    batch: int
    channels: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int


def window_partition(feat: Tensor, window: int) -> tuple[Tensor, WindowLayout]:
    """Split ``[N, d, H, W]`` into ``[N*nb, window*window, d]`` blocks.

    H and W are reflect-padded up to multiples of ``window`` first.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    N, d, H, W = feat.shape
    Hp = -(-H // window) * window
    Wp = -(-W // window) * window
    x = ops.reflect_pad2d(feat, (0, Hp - H), (0, Wp - W))
    hb, wb = Hp // window, Wp // window
    x = ops.reshape(x, (N, d, hb, window, wb, window))
    x = ops.permute(x, (0, 2, 4, 3, 5, 1))
    blocks = ops.reshape(x, (N * hb * wb, window * window, d))
    return blocks, WindowLayout(N, d, H, W, Hp, Wp, window)


def window_merge(blocks: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition`, cropping the padding away."""
    N, d, w = layout.batch, layout.channels, layout.window
    hb, wb = layout.padded_height // w, layout.padded_width // w
    x = ops.reshape(blocks, (N, hb, wb, w, w, d))
    x = ops.permute(x, (0, 5, 1, 3, 2, 4))
    x = ops.reshape(x, (N, d, layout.padded_height, layout.padded_width))
    return ops.crop2d(x, layout.height, layout.width)


# -- transformer unit --------------------------------------------------------

def _project(x: Tensor, params: Mapping[str, Tensor], name: str, adapters) -> Tensor:
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    adapter = adapters.get(name) if adapters else None
    if adapter is None:
        return ops.linear(x, w, b)
    from .adaptation import lora_forward

    return lora_forward(x, w, b, adapter)


def attention_unit(blocks: Tensor, params: Mapping[str, Tensor], prefix: str, adapters=None) -> Tensor:
    """Pre-norm single-head window attention followed by a GELU feed-forward net.

    ``blocks`` is ``[B, L, d]``. q and v projections route through a LoRA
    adapter when one is registered under ``<prefix>.q`` / ``<prefix>.v``.
    """
    p = params
    d = blocks.shape[-1]
    h = ops.layer_norm(blocks, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    q = _project(h, p, f"{prefix}.q", adapters)
    k = ops.linear(h, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"])
    v = _project(h, p, f"{prefix}.v", adapters)
    scores = ops.matmul(q, ops.permute(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    attn = ops.matmul(ops.softmax(scores, axis=-1), v)
    x = blocks + ops.linear(attn, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])
    h = ops.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    h = ops.gelu(ops.linear(h, p[f"{prefix}.ffn1.weight"], p[f"{prefix}.ffn1.bias"]))
    return x + ops.linear(h, p[f"{prefix}.ffn2.weight"], p[f"{prefix}.ffn2.bias"])


def conv(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def group_forward(feat: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, group: int,
                  adapters=None) -> Tensor:
    """``feat + conv(units(feat))`` with the M units applied in order, each on its own window partition."""
    x = feat
    for m in range(cfg.n_units):
        blocks, layout = window_partition(x, cfg.window)
        blocks = attention_unit(blocks, params, f"groups.{group}.units.{m}", adapters)
        x = window_merge(blocks, layout)
    return feat + conv(x, params, f"groups.{group}.conv")


@dataclass
class BackboneActivations:
    f0: Tensor
    groups: list[Tensor] = field(default_factory=list)
    f_final: Tensor | None = None
    penultimate_hr: Tensor | None = None
    output: Tensor | None = None


def upsample(feat: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Returns ``(penultimate_hr, output)``."""
    x = ops.leaky_relu(conv(feat, params, "up.conv_before"))
    for i, s in enumerate(SUPPORTED_SCALES[cfg.scale]):
        x = ops.pixel_shuffle(conv(x, params, f"up.stages.{i}"), s)
    penult = conv(x, params, "up.penult")
    return penult, conv(penult, params, "up.out")


def backbone_forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
                     adapters=None) -> BackboneActivations:
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"expected [N, {cfg.channels}, h, w] input, got {x.shape}")
    f0 = conv(x, params, "head")
    acts = BackboneActivations(f0=f0)
    feat = f0
    for g in range(cfg.n_groups):
        feat = group_forward(feat, params, cfg, g, adapters)
        acts.groups.append(feat)
    acts.f_final = f0 + feat
    acts.penultimate_hr, acts.output = upsample(acts.f_final, params, cfg)
    return acts
