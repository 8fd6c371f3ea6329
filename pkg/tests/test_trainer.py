import json

import numpy as np
import pytest

from ddsr import checkpoint
from ddsr.backbone import DESK_CONFIG, ModelConfig
from ddsr.data import DegradationSpec, PairedSet, PatchSampler, synthetic_corpus
from ddsr.spectral import fft2
from ddsr.tensor import Tensor
from ddsr.trainer import (
    TrainConfig,
    TrainingDiverged,
    build_model,
    dual_loss,
    evaluate,
    lr_schedule,
    overfit_probe,
    regime_config,
    train,
)

SMALL = ModelConfig(n_groups=2, n_units=2, dim=8, window=4, scale=2, m_sta=1, rank=2, alpha=2, fda_dim=4, n_fda=2,
                    up_dim=8)


@pytest.fixture(scope="module")
def pairs():
    hr = synthetic_corpus(6, 32, seed=1)
    return PairedSet.build(hr, DegradationSpec.preset("realistic", 2, seed=2))


@pytest.fixture(scope="module")
def source(pairs):
    net = build_model("pretrain", SMALL, seed=3)
    train(net, PatchSampler(pairs, 8, 2, seed=3), TrainConfig(regime="pretrain", iters=5, lr0=1e-3))
    return net


def quick(**kw):
    return TrainConfig(**{"patch": 8, "batch": 2, "iters": 6, "eval_every": 3, "lr0": 1e-3, **kw})


@pytest.mark.parametrize("iteration,lr", [(0, 2e-4), (1999, 2e-4), (2000, 1e-4), (6001, 2.5e-5)])
def test_lr_schedule_examples(iteration, lr):
    assert lr_schedule(iteration, TrainConfig()) == pytest.approx(lr, rel=1e-15)


def test_lr_schedule_rejects_negative():
    with pytest.raises(ValueError):
        lr_schedule(-1, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError, match="regime"):
        TrainConfig(regime="sgd")
    with pytest.raises(ValueError, match="lr0"):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError, match="iters"):
        TrainConfig(iters=-1)


def test_dual_loss_zero_when_exact():
    y = np.random.default_rng(0).random((2, 3, 6, 6))
    assert float(dual_loss(Tensor(y), fft2(Tensor(y)), Tensor(y)).data) == pytest.approx(0.0, abs=1e-12)


def test_dual_loss_spectrum_offset():
    from ddsr.spectral import ComplexSpectrum

    y = np.random.default_rng(2).random((1, 3, 4, 4))
    z = fft2(Tensor(y))
    shifted = ComplexSpectrum(z.real + 0.1, z.imag + 0.1)
    assert float(dual_loss(Tensor(y), shifted, Tensor(y), lam=10.0).data) == pytest.approx(1.0, abs=1e-12)


def test_dual_loss_spatial_offset():
    # offset 0.1 everywhere: spatial term 0.1; spectrum error is a DC spike of
    # 0.1 * 4 in the real plane of each 4x4 channel, so the joint real/imag
    # mean is 0.4 / 32 and lam = 10 turns it into 0.125
    y = np.zeros((1, 3, 4, 4))
    o_s = Tensor(y + 0.1)
    loss = dual_loss(o_s, fft2(o_s), Tensor(y), lam=10.0)
    assert float(loss.data) == pytest.approx(0.1 + 10 * 0.4 / 32, abs=1e-12)


def test_dual_loss_elementwise_oracle():
    rng = np.random.default_rng(1)
    o_s, re, im, y = (rng.standard_normal((2, 3, 5, 4)) for _ in range(4))
    from ddsr.spectral import ComplexSpectrum

    z = np.fft.fft2(y, norm="ortho")
    expected = np.abs(o_s - y).mean() + 3.0 * 0.5 * (np.abs(re - z.real).mean() + np.abs(im - z.imag).mean())
    got = dual_loss(Tensor(o_s), ComplexSpectrum(Tensor(re), Tensor(im)), Tensor(y), lam=3.0)
    assert float(got.data) == pytest.approx(expected, abs=1e-10)
    assert float(dual_loss(Tensor(o_s), None, Tensor(y)).data) == pytest.approx(np.abs(o_s - y).mean(), abs=1e-12)


def test_regime_configs():
    assert regime_config("ft", SMALL).use_fda == 0 and regime_config("ft", SMALL).rank == 0
    assert regime_config("dan-p", SMALL).m_sta == 1 and regime_config("dan-p", SMALL).use_fda == 1
    assert regime_config("dan-f", SMALL).m_sta == 0
    with pytest.raises(ValueError, match="budget"):
        regime_config("dan-p", SMALL.replace(m_sta=0))
    with pytest.raises(ValueError, match="source"):
        build_model("ft", SMALL, 0)
    with pytest.raises(ValueError, match="scratch"):
        build_model("ret", SMALL, 0, source=build_model("pretrain", SMALL, 0))


def test_zero_iterations_keep_checkpoint(tmp_path, pairs, source):
    net = build_model("dan-p", SMALL, 4, source)
    before = checkpoint.save(net, tmp_path / "in.ddsr").read_bytes()
    train(net, PatchSampler(pairs, 8, 2, 0), quick(iters=0), pairs)
    assert checkpoint.save(net, tmp_path / "out.ddsr").read_bytes() == before


def test_dan_p_starts_at_frozen_quality(pairs, source):
    frozen = evaluate(source, pairs)
    net = build_model("dan-p", SMALL, 5, source)
    res = train(net, PatchSampler(pairs, 8, 2, 0), quick(iters=0), pairs)
    assert res.records[0]["psnr_s"] == frozen["psnr"]
    assert res.records[0]["ssim_s"] == frozen["ssim"]


def test_frozen_tensors_untouched(pairs, source):
    net = build_model("dan-p", SMALL, 6, source)
    frozen = {k: t.data.copy() for k, t in net.frozen_params().items()}
    trainable = {k: t.data.copy() for k, t in net.trainable_params().items()}
    train(net, PatchSampler(pairs, 8, 2, 0), quick())
    assert frozen and all(np.array_equal(net.named_tensors()[k].data, v) for k, v in frozen.items())
    assert any(not np.array_equal(net.named_tensors()[k].data, v) for k, v in trainable.items())


def test_records_and_log(tmp_path, pairs, source):
    net = build_model("dan-p", SMALL, 7, source)
    res = train(net, PatchSampler(pairs, 8, 2, 0), quick(iters=7), pairs, log_path=tmp_path / "log.jsonl")
    assert [r["iter"] for r in res.records] == [0, 3, 6, 7]
    assert len(res.losses) == 7
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == json.loads(json.dumps(res.records))
    assert res.records[0]["loss"] is None
    assert res.records[1]["loss"] == pytest.approx(np.mean(res.losses[:3]))
    assert {"psnr", "ssim", "hf_error", "psnr_s", "imag_residue"} <= set(res.records[-1])


def test_deterministic_rerun(tmp_path, pairs, source):
    blobs = []
    for run in range(2):
        net = build_model("dan-p", SMALL, 8, source)
        res = train(net, PatchSampler(pairs, 8, 2, 9), quick(), pairs, log_path=tmp_path / f"{run}.jsonl")
        blobs.append((checkpoint.encode(net.config, {k: t.data for k, t in net.named_tensors().items()}),
                      (tmp_path / f"{run}.jsonl").read_bytes(), res.losses))
    assert blobs[0] == blobs[1]


class PoisonedSampler:
    """Clean batches until ``at``, then a NaN pixel."""

    def __init__(self, inner, at):
        self.inner, self.at, self.count = inner, at, 0

    def next(self):
        lr, hr = self.inner.next()
        if self.count == self.at:
            lr = lr.copy()
            lr[0, 0, 0, 0] = np.nan
        self.count += 1
        return lr, hr


def test_nan_aborts_with_iteration(pairs, source):
    net = build_model("ft", SMALL, 10, source)
    with pytest.raises(TrainingDiverged) as info:
        train(net, PoisonedSampler(PatchSampler(pairs, 8, 2, 0), 3), quick())
    assert info.value.iteration == 3
    assert all(not t.requires_grad for t in net.named_tensors().values())


def test_probe_grid_alignment(pairs, source):
    curves = overfit_probe(source, SMALL, pairs, pairs, quick(iters=3, eval_every=2), sizes=(2, 4))
    assert [(c["n_images"], c["regime"]) for c in curves] == [(2, "ft"), (2, "dan-p"), (4, "ft"), (4, "dan-p")]
    assert all(c["iters"] == [0, 2, 3] for c in curves)
    for c in curves:
        assert c["gap"] == pytest.approx(c["peak"] - c["final"]) and c["gap"] >= 0


@pytest.mark.parametrize("regime", ["pretrain", "dan-p"])
def test_loss_decreases_over_first_200_iterations(regime):
    hr = synthetic_corpus(16, 48, seed=11)
    pairs = PairedSet.build(hr, DegradationSpec.preset("realistic", 2, seed=11))
    source = build_model("pretrain", DESK_CONFIG, 12) if regime != "pretrain" else None
    net = build_model(regime, DESK_CONFIG, 12, source)
    cfg = TrainConfig(regime=regime, iters=200, patch=12, lr0=1e-3, eval_every=1000)
    losses = train(net, PatchSampler(pairs, 12, 4, 13), cfg).losses
    assert np.mean(losses[150:200]) < np.mean(losses[:50])
