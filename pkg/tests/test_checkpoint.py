import struct

import numpy as np
import pytest

from ddsr import checkpoint
from ddsr.backbone import DESK_CONFIG, ModelConfig
from ddsr.checkpoint import CheckpointError
from ddsr.model import DualDomainNet

SMALL = DESK_CONFIG.replace(n_units=2, m_sta=1, use_fda=1)


def perturbed(cfg, seed):
    net = DualDomainNet.initialize(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in net.named_tensors().values():
        t.data = (t.data + rng.standard_normal(t.shape) * 0.01).astype(np.float32)
    return net


def test_round_trip_is_bit_exact(tmp_path):
    net = perturbed(SMALL, 0)
    path = checkpoint.save(net, tmp_path / "a.ddsr")
    back = checkpoint.load(path)
    assert back.config == net.config
    a, b = net.named_tensors(), back.named_tensors()
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)
    assert path.read_bytes() == checkpoint.save(back, tmp_path / "b.ddsr").read_bytes()


def test_header_layout(tmp_path):
    blob = checkpoint.save(perturbed(SMALL, 1), tmp_path / "h.ddsr").read_bytes()
    assert blob[:4] == b"DDSR"
    version, n_fields = struct.unpack("<II", blob[4:12])
    assert version == 1 and n_fields == len(ModelConfig.field_names())
    values = struct.unpack(f"<{n_fields}q", blob[12:12 + 8 * n_fields])
    assert dict(zip(ModelConfig.field_names(), values)) == SMALL.as_dict()


def test_merged_export_drops_adapters(tmp_path):
    net = perturbed(SMALL, 2)
    back = checkpoint.load(checkpoint.save(net, tmp_path / "m.ddsr", merged=True))
    assert back.config.rank == 0 and not back.adapters
    x = np.random.default_rng(3).random((2, 3, 8, 8)).astype(np.float32)
    a_s, a_o = net.predict(x)
    b_s, b_o = back.predict(x)
    assert np.abs(a_s - b_s).max() < 1e-5 and np.abs(a_o - b_o).max() < 1e-5


def test_rejects_bad_magic_and_truncation(tmp_path):
    path = checkpoint.save(perturbed(SMALL, 4), tmp_path / "t.ddsr")
    blob = path.read_bytes()
    (tmp_path / "magic.ddsr").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "magic.ddsr")
    (tmp_path / "short.ddsr").write_bytes(blob[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load(tmp_path / "short.ddsr")
    (tmp_path / "long.ddsr").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.load(tmp_path / "long.ddsr")


def test_rejects_missing_names_and_wrong_shapes(tmp_path):
    net = perturbed(SMALL, 5)
    tensors = {k: v.data for k, v in net.named_tensors().items()}
    partial = dict(tensors)
    partial.pop("up.out.bias")
    (tmp_path / "p.ddsr").write_bytes(checkpoint.encode(SMALL, partial))
    with pytest.raises(CheckpointError, match="missing"):
        checkpoint.load(tmp_path / "p.ddsr")
    bad = dict(tensors)
    bad["head.bias"] = np.zeros(5, dtype=np.float32)
    (tmp_path / "s.ddsr").write_bytes(checkpoint.encode(SMALL, bad))
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint.load(tmp_path / "s.ddsr")


def test_rejects_incompatible_config(tmp_path):
    path = checkpoint.save(perturbed(SMALL, 6), tmp_path / "c.ddsr")
    checkpoint.load(path, expect=SMALL.replace(rank=2, m_sta=0))  # adaptation knobs may differ
    with pytest.raises(CheckpointError, match="dim"):
        checkpoint.load(path, expect=SMALL.replace(dim=16, rank=2))
