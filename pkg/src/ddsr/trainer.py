"""Objective, schedule, training regimes and the training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import ModelConfig
from .data import PairedSet, PatchSampler
from .metrics import batch_scores
from .model import REGIMES, DualDomainNet, ModelOutput
from .spectral import ComplexSpectrum, fft2, high_band_amplitude_error
from .tensor import AdamState, NonFiniteError, Tensor, adam_step, finite_checks, no_grad, ops


class TrainingDiverged(NonFiniteError):
    """Loss or gradient became non-finite; ``iteration`` says when."""

    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite loss at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    halve_every: int = 2000
    patch: int = 24
    batch: int = 4
    iters: int = 1500
    lam: float = 10.0
    regime: str = "dan-p"
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        for name in ("lr0", "halve_every", "patch", "batch", "lam", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")

    replace = replace


PAPER_TRAIN = TrainConfig(patch=96, iters=70000)
# One core, minutes not days: a higher constant rate for adaptation, and a
# pretraining schedule that halves twice within its shorter run.
DESK_TRAIN = TrainConfig(lr0=1e-3)
DESK_PRETRAIN = DESK_TRAIN.replace(regime="pretrain", iters=2000, halve_every=800)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * 0.5 ** floor(iteration / halve_every)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * 0.5 ** (iteration // cfg.halve_every)


def dual_loss(o_s: Tensor, o_f: ComplexSpectrum | None, y: Tensor, lam: float = 10.0) -> Tensor:
    """Mean L1 in the spatial domain plus ``lam`` times mean L1 in the frequency domain.

    The frequency term averages ``|.|`` jointly over the real and imaginary
    planes of ``o_f - fft2(y)``. It is skipped when ``o_f`` is None.
    """
    if o_s.shape != y.shape:
        raise ValueError(f"spatial output {o_s.shape} vs target {y.shape}")
    loss = ops.l1_mean(o_s, y)
    if o_f is None:
        return loss
    if o_f.shape != y.shape:
        raise ValueError(f"spectrum {o_f.shape} vs target {y.shape}")
    target = fft2(Tensor(y.data))
    freq = (ops.l1_mean(o_f.real, target.real) + ops.l1_mean(o_f.imag, target.imag)) * 0.5
    return loss + freq * lam


# -- regimes -------------------------------------------------------------------

def regime_config(regime: str, base: ModelConfig) -> ModelConfig:
    """Model config a regime trains: what is frozen, whether LoRA and FDA exist."""
    if regime in ("pretrain", "ret", "ft"):
        return base.replace(m_sta=0, rank=0, use_fda=0)
    if regime == "dan-p":
        if base.m_sta == 0:
            raise ValueError("dan-p needs a positive freeze budget (m_sta)")
        return base.replace(use_fda=1)
    if regime == "dan-f":
        return base.replace(m_sta=0, rank=0, use_fda=1)
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def build_model(regime: str, base: ModelConfig, seed: int, source: DualDomainNet | None = None) -> DualDomainNet:
    """Fresh init for pretrain/ret, otherwise start from ``source``."""
    cfg = regime_config(regime, base)
    if regime in ("pretrain", "ret"):
        if source is not None:
            raise ValueError(f"regime {regime!r} trains from scratch and takes no source checkpoint")
        return DualDomainNet.initialize(cfg, seed)
    if source is None:
        raise ValueError(f"regime {regime!r} needs a pretrained source checkpoint")
    return DualDomainNet.from_pretrained(source, cfg, seed)


# -- evaluation ----------------------------------------------------------------

def evaluate(net: DualDomainNet, pairs: PairedSet, batch: int = 8) -> dict:
    """PSNR/SSIM of the scored output (O if present, else O^s) and of O^s alone."""
    dtype = next(iter(net.params.values())).dtype
    outs_s, outs_o, residue = [], [], 0.0
    with no_grad():
        for i in range(0, len(pairs), batch):
            res = net(Tensor(np.asarray(pairs.lr[i:i + batch], dtype=dtype)))
            outs_s.append(res.o_s.data)
            if res.o is not None:
                outs_o.append(res.o.data)
                residue = max(residue, res.fda.imag_residue)
    o_s = np.concatenate(outs_s)
    psnr_s, ssim_s = batch_scores(o_s, pairs.hr)
    rec = {"psnr_s": psnr_s, "ssim_s": ssim_s, "hf_error_s": high_band_amplitude_error(o_s, pairs.hr)}
    if not outs_o:
        rec.update(psnr=psnr_s, ssim=ssim_s, hf_error=rec["hf_error_s"], imag_residue=0.0)
    else:
        o = np.concatenate(outs_o)
        p, s = batch_scores(o, pairs.hr)
        rec.update(psnr=p, ssim=s, hf_error=high_band_amplitude_error(o, pairs.hr), imag_residue=residue)
    return rec


# -- loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: DualDomainNet
    losses: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)


def _step_loss(net: DualDomainNet, lr: np.ndarray, hr: np.ndarray, lam: float) -> tuple[Tensor, ModelOutput]:
    out = net(Tensor(lr))
    return dual_loss(out.o_s, out.o_f, Tensor(hr), lam), out


def train(net: DualDomainNet, sampler: PatchSampler, cfg: TrainConfig, eval_set: PairedSet | None = None,
          log_path: str | Path | None = None, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the trainable tensors of ``net`` for ``cfg.iters`` iterations.

    ``net`` is updated in place. Evaluation runs before the first step, every
    ``cfg.eval_every`` iterations and after the last one; each record is
    appended to ``log_path`` as a JSON line. A non-finite loss raises
    :class:`TrainingDiverged` carrying the iteration index.
    """
    trainable = net.trainable_params()
    for name, t in net.named_tensors().items():
        t.requires_grad = name in trainable
        t.grad = None
    state = AdamState(lr=cfg.lr0)
    result = TrainResult(net)
    log = Path(log_path).open("w") if log_path is not None else None
    window: list[float] = []

    def record(iteration: int) -> None:
        rec = {"iter": iteration, "lr": lr_schedule(iteration, cfg),
               "loss": float(np.mean(window)) if window else None}
        if eval_set is not None:
            rec.update(evaluate(net, eval_set))
        result.records.append(rec)
        window.clear()
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
        if on_record is not None:
            on_record(rec)

    try:
        record(0)
        for it in range(cfg.iters):
            state.lr = lr_schedule(it, cfg)
            lr, hr = sampler.next()
            with finite_checks(False):
                loss, _ = _step_loss(net, lr, hr, cfg.lam)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(it)
                loss.backward()
            grads = {k: t.grad for k, t in trainable.items()}
            try:
                adam_step(trainable, grads, state)
            except NonFiniteError as exc:
                raise TrainingDiverged(it, str(exc)) from exc
            for t in trainable.values():
                t.grad = None
            result.losses.append(value)
            window.append(value)
            done = it + 1
            if done % cfg.eval_every == 0 or done == cfg.iters:
                record(done)
    finally:
        if log is not None:
            log.close()
        for t in net.named_tensors().values():
            t.requires_grad = False
            t.grad = None
    return result


# -- overfitting probe -----------------------------------------------------------

PROBE_SIZES = (10, 25, 50, 100)
PROBE_REGIMES = ("ft", "dan-p")


def overfit_probe(source: DualDomainNet, base: ModelConfig, train_pairs: PairedSet, eval_pairs: PairedSet,
                  cfg: TrainConfig, sizes=PROBE_SIZES, regimes=PROBE_REGIMES) -> list[dict]:
    """PSNR-vs-iteration curves for each ``(n_images, regime)``.

    Subset ``n`` is the first ``n`` training pairs, so smaller subsets are
    nested in larger ones. Returns one dict per curve with the iteration
    grid, the PSNR values and the peak-minus-final gap.
    """
    curves = []
    for n in sizes:
        subset = train_pairs.subset(n)
        for regime in regimes:
            net = build_model(regime, base, cfg.seed, source)
            sampler = PatchSampler(subset, cfg.patch, cfg.batch, cfg.seed)
            res = train(net, sampler, cfg.replace(regime=regime), eval_pairs)
            iters = [r["iter"] for r in res.records]
            values = [r["psnr"] for r in res.records]
            curves.append({"n_images": n, "regime": regime, "iters": iters, "psnr": values,
                           "peak": max(values), "final": values[-1], "gap": max(values) - values[-1]})
    return curves


def config_dict(cfg) -> dict:
    return asdict(cfg)
