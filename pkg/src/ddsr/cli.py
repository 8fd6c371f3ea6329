"""Command-line entry point: ``ddsr {pretrain,adapt,infer,eval,ablate,probe}``.

Exit codes: 0 success, 2 usage or config conflict, 3 unreadable or missing
data, 4 numeric failure (training diverged). ``DDSR_THREADS`` caps the BLAS
thread pool. Every command that takes ``--out`` leaves one ``manifest.json``
there describing how the directory was produced.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .ablation import SWEEPS, run_sweep, write_csv
from .backbone import DESK_CONFIG, PAPER_CONFIG, POLICIES, ModelConfig
from .checkpoint import CheckpointError
from .data import (
    PROFILES,
    DegradationSpec,
    PairedSet,
    PatchSampler,
    bicubic_up,
    load_image_dir,
    read_png,
    synthetic_pairs,
    write_png,
)
from .metrics import batch_scores, psnr
from .model import DualDomainNet
from .spectral import amplitude_map, fft2
from .tensor import NonFiniteError, Tensor
from .trainer import (
    DESK_PRETRAIN,
    DESK_TRAIN,
    PAPER_TRAIN,
    PROBE_REGIMES,
    PROBE_SIZES,
    TrainConfig,
    build_model,
    evaluate,
    overfit_probe,
    train,
)

log = logging.getLogger("ddsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ddsr"
AMPLITUDE_FILES = {"input": "amp_input.png", "o_s": "amp_spatial.png", "o": "amp_output.png", "gt": "amp_gt.png"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- presets ---------------------------------------------------------------------

@dataclass(frozen=True)
class DataPreset:
    n_images: int
    hr_size: int
    n_eval: int
    eval_size: int


PRESETS = {
    "desk": (DESK_CONFIG, DESK_TRAIN, DataPreset(n_images=64, hr_size=96, n_eval=8, eval_size=64)),
    "paper": (PAPER_CONFIG, PAPER_TRAIN, DataPreset(n_images=800, hr_size=384, n_eval=20, eval_size=256)),
}

# flag name -> ModelConfig field
ARCH_FLAGS = {"scale": "scale", "n": "n_groups", "m": "n_units", "d": "dim", "window": "window",
              "up_dim": "up_dim"}
ADAPT_FLAGS = {"msta": "m_sta", "rank": "rank", "alpha": "alpha", "df": "fda_dim", "nf": "n_fda"}
TRAIN_FLAGS = {"iters": "iters", "lr": "lr0", "halve_every": "halve_every", "patch": "patch", "batch": "batch",
               "lam": "lam", "eval_every": "eval_every"}


# -- manifest --------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int
    config: dict
    checkpoints: dict = field(default_factory=dict)
    version: str = ""
    timings: dict = field(default_factory=dict)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def artifact_version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Stopwatch:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 3)


# -- argument parsing --------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("-q", "--quiet", action="store_true")


def _arch(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--scale", type=int)
    g.add_argument("--n", type=int, help="transformer groups")
    g.add_argument("--m", type=int, help="units per group")
    g.add_argument("--d", type=int, help="feature dimension")
    g.add_argument("--window", type=int)
    g.add_argument("--up-dim", type=int)


def _adapt_knobs(p):
    g = p.add_argument_group("adaptation")
    g.add_argument("--policy", choices=POLICIES)
    g.add_argument("--msta", type=int, help="freeze budget (units per group, or groups)")
    g.add_argument("--rank", type=int)
    g.add_argument("--alpha", type=int)
    g.add_argument("--df", type=int, help="frequency branch dimension")
    g.add_argument("--nf", type=int, help="fusion stages (defaults to the group count)")


def _training(p):
    g = p.add_argument_group("training")
    g.add_argument("--iters", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--halve-every", type=int)
    g.add_argument("--patch", type=int, help="LR patch side")
    g.add_argument("--batch", type=int)
    g.add_argument("--lam", type=float)
    g.add_argument("--eval-every", type=int)


def _data(p, profile: str):
    g = p.add_argument_group("data")
    g.add_argument("--data", default="synthetic", help="'synthetic' or a directory of HR PNGs")
    g.add_argument("--profile", choices=PROFILES, default=profile)
    g.add_argument("--n-images", type=int)
    g.add_argument("--hr-size", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--eval-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddsr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ddsr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the backbone from scratch")
    _common(p)
    _arch(p)
    _training(p)
    _data(p, "simulated")

    p = sub.add_parser("adapt", help="adapt a pretrained backbone to a new degradation")
    _common(p)
    _arch(p)
    _adapt_knobs(p)
    _training(p)
    _data(p, "realistic")
    p.add_argument("--from", dest="source", type=Path, help="pretrained checkpoint or run directory")
    p.add_argument("--regime", choices=("ret", "ft", "dan-p", "dan-f"), default="dan-p")

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gt", type=Path, help="HR ground truth, for metrics and its amplitude map")
    p.add_argument("--emit-freq", action="store_true", help="also write log-amplitude maps")
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a paired set")
    _common(p, out_required=False)
    _data(p, "realistic")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--scale", type=int)

    p = sub.add_parser("ablate", help="sweep one adaptation knob")
    _common(p)
    _adapt_knobs(p)
    _training(p)
    _data(p, "realistic")
    p.add_argument("--from", dest="source", type=Path, required=True)
    p.add_argument("--sweep", choices=SWEEPS, required=True)
    p.add_argument("--values", help="comma-separated sweep values (freeze-policy: frozen group-equivalents)")

    p = sub.add_parser("probe", help="PSNR-vs-iteration curves on small training subsets")
    _common(p)
    _adapt_knobs(p)
    _training(p)
    _data(p, "realistic")
    p.add_argument("--from", dest="source", type=Path, required=True)
    p.add_argument("--overfit", action="store_true", required=True)
    p.add_argument("--sizes", default=",".join(map(str, PROBE_SIZES)))
    p.add_argument("--regimes", default=",".join(PROBE_REGIMES))
    return parser


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


# -- resolution ----------------------------------------------------------------------

def _overrides(args, mapping) -> dict:
    return {f: getattr(args, flag) for flag, f in mapping.items() if getattr(args, flag, None) is not None}


def resolve_train(args, regime: str) -> TrainConfig:
    _, base, _ = PRESETS[args.preset]
    if args.preset == "desk" and regime == "pretrain":
        base = DESK_PRETRAIN
    return base.replace(regime=regime, seed=args.seed, **_overrides(args, TRAIN_FLAGS))


def resolve_data(args) -> DataPreset:
    preset = PRESETS[args.preset][2]
    return DataPreset(**{k: getattr(args, k) if getattr(args, k) is not None else getattr(preset, k)
                         for k in ("n_images", "hr_size", "n_eval", "eval_size")})


def adapted_config(args, arch: ModelConfig) -> ModelConfig:
    """Architecture from ``arch``; adaptation knobs from the preset and flags."""
    preset = PRESETS[args.preset][0]
    knobs = {f: getattr(preset, f) for f in ADAPT_FLAGS.values()}
    # preset defaults shrink to fit smaller architectures; explicit flags do not
    knobs["m_sta"] = min(preset.m_sta, arch.n_units - 1)
    knobs["rank"] = min(preset.rank, arch.dim - 1)
    knobs["n_fda"] = arch.n_groups
    knobs.update(_overrides(args, ADAPT_FLAGS))
    if args.policy is not None:
        knobs["policy"] = POLICIES.index(args.policy)
    return arch.replace(**knobs)


def load_source(path: Path) -> DualDomainNet:
    path = path / CHECKPOINT_NAME if path.is_dir() else path
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    return checkpoint.load(path)


def _check_arch(args, arch: ModelConfig) -> None:
    for flag, f in ARCH_FLAGS.items():
        given = getattr(args, flag, None)
        if given is not None and given != getattr(arch, f):
            raise UsageError(f"--{flag.replace('_', '-')} {given} conflicts with the checkpoint ({f}={getattr(arch, f)})")


def load_pairs(args, data: DataPreset, scale: int, role: str) -> PairedSet:
    """Training (``role='train'``) or held-out pairs from ``--data``."""
    if args.data == "synthetic":
        n, size = (data.n_images, data.hr_size) if role == "train" else (data.n_eval, data.eval_size)
        if size % scale:
            raise UsageError(f"HR size {size} is not divisible by scale {scale}")
        return synthetic_pairs(args.profile, n, size, scale, args.seed, role)
    root = Path(args.data)
    sub = root / role if (root / role).is_dir() else root
    try:
        hr = load_image_dir(sub, scale)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    code = args.seed * 10 + (1 if role == "train" else 2)
    return PairedSet.build(hr, DegradationSpec.preset(args.profile, scale, code))


def _check_patch(cfg: TrainConfig, pairs: PairedSet) -> None:
    side = min(pairs.lr.shape[-2:])
    if cfg.patch > side:
        raise UsageError(f"--patch {cfg.patch} exceeds the LR image side {side}")


# -- commands -------------------------------------------------------------------------

def _progress(quiet: bool):
    def emit(rec):
        if not quiet:
            loss = "-" if rec["loss"] is None else f"{rec['loss']:.4f}"
            extra = f" psnr {rec['psnr']:.3f}" if "psnr" in rec else ""
            log.info("iter %d lr %.2e loss %s%s", rec["iter"], rec["lr"], loss, extra)
    return emit


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_and_save(args, net: DualDomainNet, cfg: TrainConfig, data: DataPreset, watch: Stopwatch) -> dict:
    scale = net.config.scale
    with watch("data"):
        train_pairs = load_pairs(args, data, scale, "train")
        eval_pairs = load_pairs(args, data, scale, "eval")
    _check_patch(cfg, train_pairs)
    with watch("train"):
        result = train(net, PatchSampler(train_pairs, cfg.patch, cfg.batch, cfg.seed), cfg, eval_pairs,
                       log_path=args.out / "train.jsonl", on_record=_progress(args.quiet))
    checkpoint.save(net, args.out / CHECKPOINT_NAME)
    final = result.records[-1]
    _write_json({k: v for k, v in final.items() if k not in ("lr", "loss")}, args.out / "metrics.json")
    return final


def _arch_from_flags(args) -> ModelConfig:
    # adaptation knobs are reset so that e.g. --m below the preset freeze budget is valid
    base = PRESETS[args.preset][0].replace(m_sta=0, rank=0)
    over = _overrides(args, ARCH_FLAGS)
    return base.replace(n_fda=min(base.n_fda, over.get("n_groups", base.n_groups)), **over)


def cmd_pretrain(args, watch: Stopwatch) -> RunManifest:
    model = _arch_from_flags(args)
    cfg = resolve_train(args, "pretrain")
    data = resolve_data(args)
    net = build_model("pretrain", model, args.seed)
    _train_and_save(args, net, cfg, data, watch)
    return RunManifest("pretrain", sys.argv[1:], args.seed,
                       {"model": net.config.as_dict(), "train": asdict(cfg), "data": _data_dict(args, data)},
                       {"output": str(args.out / CHECKPOINT_NAME)})


def _data_dict(args, data: DataPreset) -> dict:
    return {"source": args.data, "profile": args.profile, **asdict(data)}


def cmd_adapt(args, watch: Stopwatch) -> RunManifest:
    if args.regime == "ret":
        if args.source is not None:
            raise UsageError("regime 'ret' trains from scratch; drop --from")
        arch = _arch_from_flags(args)
        source = None
    else:
        if args.source is None:
            raise UsageError(f"regime {args.regime!r} needs --from")
        source = load_source(args.source)
        arch = source.config
        _check_arch(args, arch)
    model = adapted_config(args, arch)
    cfg = resolve_train(args, args.regime)
    data = resolve_data(args)
    try:
        net = build_model(args.regime, model, args.seed, source)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ledger = net.ledger()
    _write_json(ledger, args.out / "ledger.json")
    print(json.dumps(ledger, sort_keys=True))
    _train_and_save(args, net, cfg, data, watch)
    ckpts = {"output": str(args.out / CHECKPOINT_NAME)}
    if args.source is not None:
        ckpts["source"] = str(args.source)
    return RunManifest("adapt", sys.argv[1:], args.seed,
                       {"regime": args.regime, "model": net.config.as_dict(), "train": asdict(cfg),
                        "data": _data_dict(args, data)}, ckpts)


def _amplitude_png(img: np.ndarray, norm: float) -> np.ndarray:
    amp = amplitude_map(fft2(Tensor(img[None].astype(np.float64)))).data[0].mean(axis=0)
    return amp / norm


def cmd_infer(args, watch: Stopwatch) -> RunManifest:
    net = load_source(args.ckpt)
    try:
        lr = read_png(args.input)
        gt = read_png(args.gt) if args.gt is not None else None
    except OSError as exc:
        raise DataError(f"cannot read image: {exc}") from exc
    s = net.config.scale
    if gt is not None and gt.shape[1:] != (lr.shape[1] * s, lr.shape[2] * s):
        raise DataError(f"ground truth {gt.shape[1:]} does not match input {lr.shape[1:]} at scale {s}")
    with watch("infer"):
        o_s, o = net.predict(lr[None])
    o_s = o_s[0].astype(np.float64)
    o = o[0].astype(np.float64) if o is not None else None
    final = o if o is not None else o_s
    write_png(final, args.out / "sr.png")
    if o is not None:
        write_png(o_s, args.out / "sr_spatial.png")
    if args.emit_freq:
        hr_maps = {"o_s": o_s, "o": final}
        if gt is not None:
            hr_maps["gt"] = gt
        raw = {k: _amplitude_png(v, 1.0) for k, v in hr_maps.items()}
        norm = max(m.max() for m in raw.values()) or 1.0
        for k, m in raw.items():
            write_png(m / norm, args.out / AMPLITUDE_FILES[k])
        inp = _amplitude_png(lr, 1.0)
        write_png(inp / (inp.max() or 1.0), args.out / AMPLITUDE_FILES["input"])
    if gt is not None:
        metrics = {"psnr": psnr(np.clip(final, 0, 1), gt), "psnr_s": psnr(np.clip(o_s, 0, 1), gt)}
        _write_json(metrics, args.out / "metrics.json")
    return RunManifest("infer", sys.argv[1:], 0, {"model": net.config.as_dict(), "input": str(args.input),
                                                  "gt": None if args.gt is None else str(args.gt),
                                                  "emit_freq": args.emit_freq},
                       {"input": str(args.ckpt)})


def cmd_eval(args, watch: Stopwatch) -> RunManifest:
    net = load_source(args.ckpt)
    scale = net.config.scale
    if args.scale is not None and args.scale != scale:
        raise UsageError(f"--scale {args.scale} but the checkpoint upsamples by {scale}")
    data = resolve_data(args)
    with watch("data"):
        pairs = load_pairs(args, data, scale, "eval")
    if len(pairs) == 0:
        raise DataError("evaluation set is empty")
    with watch("eval"):
        scores = evaluate(net, pairs)
    bic = np.stack([bicubic_up(img, scale) for img in pairs.lr])
    b_psnr, b_ssim = batch_scores(bic, pairs.hr)
    result = {"psnr": scores["psnr"], "ssim": scores["ssim"], "n_images": len(pairs),
              "psnr_s": scores["psnr_s"], "ssim_s": scores["ssim_s"], "hf_error": scores["hf_error"],
              "hf_error_s": scores["hf_error_s"], "bicubic_psnr": b_psnr, "bicubic_ssim": b_ssim}
    print(json.dumps(result, sort_keys=True))
    if args.out is not None:
        _write_json(result, args.out / "metrics.json")
    return RunManifest("eval", sys.argv[1:], args.seed, {"model": net.config.as_dict(),
                                                         "data": _data_dict(args, data)},
                       {"input": str(args.ckpt)})


def _adapt_setup(args, watch: Stopwatch):
    source = load_source(args.source)
    model = adapted_config(args, source.config)
    cfg = resolve_train(args, "dan-p")
    data = resolve_data(args)
    with watch("data"):
        train_pairs = load_pairs(args, data, model.scale, "train")
        eval_pairs = load_pairs(args, data, model.scale, "eval")
    _check_patch(cfg, train_pairs)
    return source, model, cfg, data, train_pairs, eval_pairs


def cmd_ablate(args, watch: Stopwatch) -> RunManifest:
    source, model, cfg, data, train_pairs, eval_pairs = _adapt_setup(args, watch)
    values = _int_list(args.values, "--values") if args.values else None

    def show(row):
        if not args.quiet:
            log.info("%s fraction %.4f psnr %.3f", row["setting"], row["trainable_fraction"], row["psnr"])

    with watch("sweep"):
        try:
            rows = run_sweep(args.sweep, source, model, train_pairs, eval_pairs, cfg, values, on_row=show)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    path = write_csv(rows, args.out / f"ablate_{args.sweep}.csv")
    return RunManifest("ablate", sys.argv[1:], args.seed,
                       {"sweep": args.sweep, "values": values, "model": model.as_dict(), "train": asdict(cfg),
                        "data": _data_dict(args, data)},
                       {"source": str(args.source), "csv": str(path)})


def cmd_probe(args, watch: Stopwatch) -> RunManifest:
    sizes = _int_list(args.sizes, "--sizes")
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    if not sizes or not regimes:
        raise UsageError("--sizes and --regimes must be non-empty")
    if args.n_images is None:
        args.n_images = max(sizes)
    source, model, cfg, data, train_pairs, eval_pairs = _adapt_setup(args, watch)
    if max(sizes) > len(train_pairs):
        raise UsageError(f"largest probe size {max(sizes)} exceeds the {len(train_pairs)} training images")
    with watch("probe"):
        try:
            curves = overfit_probe(source, model, train_pairs, eval_pairs, cfg, sizes, regimes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    for c in curves:
        with (args.out / f"probe_n{c['n_images']}_{c['regime']}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "psnr"])
            w.writerows([i, repr(p)] for i, p in zip(c["iters"], c["psnr"]))
    report = [{k: c[k] for k in ("n_images", "regime", "peak", "final", "gap")} for c in curves]
    _write_json(report, args.out / "probe_report.json")
    for r in report:
        print(f"n={r['n_images']:>3} {r['regime']:<6} peak {r['peak']:.3f} final {r['final']:.3f} "
              f"gap {r['gap']:.3f}")
    return RunManifest("probe", sys.argv[1:], args.seed,
                       {"sizes": sizes, "regimes": regimes, "model": model.as_dict(), "train": asdict(cfg),
                        "data": _data_dict(args, data)}, {"source": str(args.source)})


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate, "probe": cmd_probe}


def _thread_limit():
    raw = os.environ.get("DDSR_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"DDSR_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        threads = _thread_limit()
        if getattr(args, "out", None) is not None:
            args.out.mkdir(parents=True, exist_ok=True)
        watch = Stopwatch()
        if threads is None:
            manifest = COMMANDS[args.command](args, watch)
        else:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                manifest = COMMANDS[args.command](args, watch)
        if getattr(args, "out", None) is not None:
            manifest.version = artifact_version()
            manifest.timings = watch.timings
            manifest.write(args.out)
        return EXIT_OK
    except UsageError as exc:
        print(f"ddsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"ddsr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"ddsr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ddsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
