"""Sweeps over the adaptation knobs, one seed-pinned DAN-P run per setting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .backbone import POLICIES, ModelConfig
from .data import PairedSet, PatchSampler
from .model import DualDomainNet
from .trainer import TrainConfig, build_model, evaluate, train

SWEEPS = ("freeze-policy", "rank", "df", "nf")
CSV_FIELDS = ("setting", "trainable_fraction", "trainable_params", "psnr", "ssim")


@dataclass(frozen=True)
class SweepPoint:
    setting: str
    config: ModelConfig


def sweep_points(kind: str, base: ModelConfig, values=None) -> list[SweepPoint]:
    """Settings for one sweep.

    The freeze-policy grid is indexed by the number of frozen units: policies
    that freeze whole groups are compared with per-group policies freezing the
    same count, so each grid point has one row per policy.
    """
    if kind == "rank":
        values = (0, 1, 2, 4, 8) if values is None else values
        return [SweepPoint(f"rank={r}", base.replace(rank=int(r))) for r in values]
    if kind == "df":
        values = (4, 8, 16, 32) if values is None else values
        return [SweepPoint(f"df={d}", base.replace(fda_dim=int(d))) for d in values]
    if kind == "nf":
        values = range(1, base.n_groups + 1) if values is None else values
        return [SweepPoint(f"nf={n}", base.replace(n_fda=int(n))) for n in values]
    if kind == "freeze-policy":
        groups = range(1, base.n_groups + 1) if values is None else values
        points = []
        for g in groups:
            units = int(g) * base.n_units
            if units % base.n_groups:
                raise ValueError(f"{units} frozen units cannot be split evenly over {base.n_groups} groups")
            per_group = units // base.n_groups
            for code, policy in enumerate(POLICIES):
                budget = int(g) if policy == "shallow_groups" else per_group
                points.append(SweepPoint(f"policy={policy};frozen_units={units}",
                                         base.replace(policy=code, m_sta=budget)))
        return points
    raise ValueError(f"unknown sweep {kind!r}; expected one of {SWEEPS}")


def run_point(point: SweepPoint, source: DualDomainNet, train_pairs: PairedSet, eval_pairs: PairedSet,
              cfg: TrainConfig) -> dict:
    net = build_model("dan-p", point.config, cfg.seed, source)
    sampler = PatchSampler(train_pairs, cfg.patch, cfg.batch, cfg.seed)
    train(net, sampler, cfg.replace(regime="dan-p"))
    scores = evaluate(net, eval_pairs)
    ledger = net.ledger()
    return {"setting": point.setting, "trainable_fraction": ledger["fraction_vs_ft"],
            "trainable_params": ledger["trainable_with_fda"], "psnr": scores["psnr"], "ssim": scores["ssim"]}


def run_sweep(kind: str, source: DualDomainNet, base: ModelConfig, train_pairs: PairedSet, eval_pairs: PairedSet,
              cfg: TrainConfig, values=None, on_row=None) -> list[dict]:
    rows = []
    for point in sweep_points(kind, base, values):
        rows.append(run_point(point, source, train_pairs, eval_pairs, cfg))
        if on_row is not None:
            on_row(rows[-1])
    return rows


def write_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
