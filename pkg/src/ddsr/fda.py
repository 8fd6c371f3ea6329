"""Frequency-domain adaptation branch.

Spectra enter the branch as stacked real/imaginary channel blocks, are
refined by residual fusion blocks that inject the spectra of backbone group
features, upsampled by pixel shuffle, fused additively with the spectrum of
the backbone's penultimate HR feature, and projected to the HR image
spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backbone import ModelConfig, _conv_shapes, conv
from .spectral import ComplexSpectrum, fft2, ifft2
from .tensor import Tensor, ops


def fda_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    df, d, c, u, s = cfg.fda_dim, cfg.dim, cfg.channels, cfg.up_dim, cfg.scale
    shapes = _conv_shapes("fda.init", df, 2 * c)
    for n in range(cfg.n_fda):
        p = f"fda.blocks.{n}"
        shapes.update(_conv_shapes(f"{p}.proj", df, 2 * d, k=1))
        shapes.update(_conv_shapes(f"{p}.res1.conv1", df, df))
        shapes.update(_conv_shapes(f"{p}.res1.conv2", df, df))
        shapes.update(_conv_shapes(f"{p}.res2.conv1", df, 2 * df))
        shapes.update(_conv_shapes(f"{p}.res2.conv2", df, df))
    shapes.update(_conv_shapes("fda.up.conv", df * s * s, df))
    shapes.update(_conv_shapes("fda.up.proj", df, 2 * u, k=1))
    shapes.update(_conv_shapes("fda.up.out", 2 * c, df))
    return shapes


def residual_path(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """conv3x3 -> GELU -> conv3x3."""
    return conv(ops.gelu(conv(x, params, f"{prefix}.conv1")), params, f"{prefix}.conv2")


@dataclass
class FdaState:
    f0: Tensor
    stages: list[Tensor] = field(default_factory=list)
    spectrum: ComplexSpectrum | None = None
    imag_residue: float = 0.0


def init_freq_feature(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return conv(fft2(x).stacked(), params, "fda.init")


def fusion_block(prev: Tensor, group_feat: Tensor, params: Mapping[str, Tensor], stage: int,
                 cfg: ModelConfig | None = None) -> Tensor:
    if cfg is not None and stage >= cfg.n_fda:
        raise IndexError(f"fusion stage {stage} beyond n_fda={cfg.n_fda}")
    p = f"fda.blocks.{stage}"
    embed = conv(fft2(group_feat).stacked(), params, f"{p}.proj")
    refined = prev + residual_path(prev, params, f"{p}.res1")
    return refined + residual_path(ops.concat([refined, embed], axis=1), params, f"{p}.res2")


def freq_upsample(feat: Tensor, penultimate_hr: Tensor, params: Mapping[str, Tensor],
                  cfg: ModelConfig) -> ComplexSpectrum:
    x = ops.pixel_shuffle(conv(feat, params, "fda.up.conv"), cfg.scale)
    if x.shape[-2:] != penultimate_hr.shape[-2:]:
        raise ValueError(f"frequency path at {x.shape[-2:]} but penultimate feature at {penultimate_hr.shape[-2:]}")
    x = x + conv(fft2(penultimate_hr).stacked(), params, "fda.up.proj")
    out = conv(x, params, "fda.up.out")
    real, imag = ops.split(out, 2, axis=1)
    return ComplexSpectrum(real, imag)


def fda_output(spectrum: ComplexSpectrum) -> tuple[Tensor, float]:
    """Real part of the inverse transform plus the discarded imaginary residue."""
    return ifft2(spectrum, return_residue=True)


def fda_forward(x: Tensor, group_feats: Sequence[Tensor], penultimate_hr: Tensor,
                params: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, FdaState]:
    """Run the branch; consumes the last ``cfg.n_fda`` group features."""
    state = FdaState(f0=init_freq_feature(x, params))
    feat = state.f0
    used = list(group_feats)[len(group_feats) - cfg.n_fda:] if cfg.n_fda else []
    for n, g in enumerate(used):
        feat = fusion_block(feat, g, params, n, cfg)
        state.stages.append(feat)
    state.spectrum = freq_upsample(feat, penultimate_hr, params, cfg)
    out, state.imag_residue = fda_output(state.spectrum)
    return out, state
