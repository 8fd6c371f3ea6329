import re

import numpy as np
import pytest

from ddsr.adaptation import (
    LoraAdapter,
    apply_freeze_plan,
    count_trainable,
    create_adapters,
    full_finetune_plan,
    lora_forward,
    merge_lora,
)
from ddsr.backbone import DESK_CONFIG, PAPER_CONFIG, POLICIES, ModelConfig, backbone_param_shapes
from ddsr.model import DualDomainNet
from ddsr.tensor import Tensor, grad_check


def test_lora_hand_case():
    a = LoraAdapter(Tensor(np.array([[1.0], [0.0]])), Tensor(np.array([[0.0, 1.0]])), 1.0)
    x = np.array([[2.0, 5.0]])
    y = lora_forward(Tensor(x), Tensor(np.eye(2)), None, a)
    assert y.data.tolist() == [[2.0, 7.0]]  # x + [0, x1]


def test_fresh_adapter_is_exact_zero():
    rng = np.random.default_rng(0)
    a = LoraAdapter.create(16, 16, 4, 4, rng, np.float64)
    w, b = Tensor(rng.standard_normal((16, 16))), Tensor(rng.standard_normal(16))
    x = Tensor(rng.standard_normal((5, 16)))
    from ddsr.tensor import ops

    assert np.array_equal(lora_forward(x, w, b, a).data, ops.linear(x, w, b).data)
    assert np.array_equal(merge_lora(w, a).data, w.data)


def test_lora_matches_dense_oracle():
    rng = np.random.default_rng(1)
    a = LoraAdapter(Tensor(rng.standard_normal((16, 4))), Tensor(rng.standard_normal((4, 16))), 0.5)
    w, b = rng.standard_normal((16, 16)), rng.standard_normal(16)
    x = rng.standard_normal((7, 16))
    dense = x @ (w + 0.5 * a.down.data @ a.up.data) + b
    np.testing.assert_allclose(lora_forward(Tensor(x), Tensor(w), Tensor(b), a).data, dense, atol=1e-6)


def test_rank_one_merge_by_hand():
    a = LoraAdapter(Tensor(np.array([[1.0], [2.0]])), Tensor(np.array([[3.0, -1.0]])), 2.0)
    merged = merge_lora(Tensor(np.zeros((2, 2))), a).data
    assert merged.tolist() == [[6.0, -2.0], [12.0, -4.0]]


def test_lora_gradients():
    rng = np.random.default_rng(2)
    a = LoraAdapter(Tensor(rng.standard_normal((6, 2))), Tensor(rng.standard_normal((2, 5))), 0.7)
    x, w, b = Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((6, 5))), Tensor(rng.standard_normal(5))
    assert grad_check(lambda *t: lora_forward(x, w, b, a), [x, a.down, a.up]) < 1e-6


def test_adapter_validation():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="rank mismatch"):
        LoraAdapter(Tensor(np.zeros((8, 2))), Tensor(np.zeros((3, 8))), 1.0)
    with pytest.raises(ValueError, match="smaller"):
        LoraAdapter(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))), 1.0)
    a = LoraAdapter.create(8, 8, 2, 2, rng)
    with pytest.raises(ValueError, match="does not fit"):
        lora_forward(Tensor(np.zeros((1, 6))), Tensor(np.zeros((6, 8))), None, a)


def names(cfg):
    return list(backbone_param_shapes(cfg))


def test_shallow_units_plan():
    cfg = DESK_CONFIG.replace(m_sta=3)
    plan = apply_freeze_plan(names(cfg), cfg)
    assert plan.frozen.isdisjoint(plan.trainable)
    assert plan.frozen | plan.trainable == set(names(cfg))
    assert "head.weight" in plan.frozen
    assert "groups.1.units.2.q.weight" in plan.frozen
    assert "groups.1.units.3.q.weight" in plan.trainable
    assert "groups.0.conv.weight" in plan.trainable and "up.out.weight" in plan.trainable
    assert plan.lora_targets == {f"groups.{g}.units.{m}.{p}" for g in range(2) for m in range(3) for p in "qv"}
    assert all(f"{t}.weight" in plan.frozen for t in plan.lora_targets)


def test_boundaries():
    cfg = DESK_CONFIG
    ft = apply_freeze_plan(names(cfg), cfg, budget=0)
    assert not ft.frozen and not ft.lora_targets
    assert full_finetune_plan(names(cfg), cfg) == ft
    full = apply_freeze_plan(names(cfg), cfg, budget=cfg.n_units)
    units = [n for n in names(cfg) if ".units." in n]
    assert set(units) <= full.frozen
    assert {n for n in full.trainable} == {n for n in names(cfg) if not n.startswith("head.") and ".units." not in n}
    with pytest.raises(ValueError, match="budget"):
        apply_freeze_plan(names(cfg), cfg, budget=cfg.n_units + 1)
    with pytest.raises(ValueError, match="policy"):
        apply_freeze_plan(names(cfg), cfg, policy="random")


def test_other_policies():
    cfg = DESK_CONFIG
    groups = apply_freeze_plan(names(cfg), cfg, "shallow_groups", 1)
    assert "groups.0.units.5.q.weight" in groups.frozen and "groups.0.conv.weight" in groups.frozen
    assert "groups.1.units.0.q.weight" in groups.trainable
    deep = apply_freeze_plan(names(cfg), cfg, "deep_units_per_group", 2)
    assert "groups.0.units.5.ffn1.weight" in deep.frozen and "groups.0.units.3.ffn1.weight" in deep.trainable
    assert "head.weight" in deep.frozen


def unit_size(d, ratio=2):
    return 4 * d + 4 * (d * d + d) + 2 * ratio * d * d + ratio * d + d


def brute_force_counts(cfg):
    """Independent enumeration from the architecture description."""
    d, u, c, s = cfg.dim, cfg.up_dim, cfg.channels, cfg.scale
    head = 9 * c * d + d
    group_conv = 9 * d * d + d
    stages = {2: [2], 3: [3], 4: [2, 2], 8: [2, 2, 2]}[s]
    up = 9 * d * u + u + sum(9 * u * u * k * k + u * k * k for k in stages) + 9 * u * u + u + 9 * u * c + c
    total = head + cfg.n_groups * (cfg.n_units * unit_size(d, cfg.mlp_ratio) + group_conv) + up
    frozen = head + cfg.n_groups * cfg.m_sta * unit_size(d, cfg.mlp_ratio)
    lora = cfg.n_groups * cfg.m_sta * 2 * cfg.rank * (d + d)
    return total, frozen, lora


@pytest.mark.parametrize("cfg", [DESK_CONFIG, PAPER_CONFIG, DESK_CONFIG.replace(m_sta=2, rank=1)])
def test_ledger_matches_enumeration(cfg):
    shapes = backbone_param_shapes(cfg)
    plan = apply_freeze_plan(list(shapes), cfg)
    adapters = {t: (cfg.dim, cfg.dim, cfg.rank) for t in plan.lora_targets}
    ledger = count_trainable(plan, shapes, adapters)
    total, frozen, lora = brute_force_counts(cfg)
    assert ledger["ft_trainable"] == total
    assert ledger["frozen"] == frozen and ledger["lora"] == lora
    assert ledger["trainable"] + ledger["frozen"] == ledger["total"]
    assert ledger["fraction_vs_ft"] == (total - frozen + lora) / total


def test_full_size_fraction_near_thirty_percent():
    shapes = backbone_param_shapes(PAPER_CONFIG)
    plan = apply_freeze_plan(list(shapes), PAPER_CONFIG)
    adapters = {t: (180, 180, 4) for t in plan.lora_targets}
    ledger = count_trainable(plan, shapes, adapters)
    assert 0.25 <= ledger["fraction_vs_ft"] <= 0.35
    assert ledger["lora"] == 6 * 5 * 2 * 4 * 360
    # six trainable units in total: one per group
    trainable_units = {re.match(r"groups\.\d+\.units\.\d+", n).group(0) for n in plan.trainable if ".units." in n}
    assert trainable_units == {f"groups.{g}.units.5" for g in range(6)}


def test_ft_fraction_is_one_and_lora_formula():
    cfg = DESK_CONFIG.replace(m_sta=0, rank=0)
    shapes = backbone_param_shapes(cfg)
    assert count_trainable(apply_freeze_plan(list(shapes), cfg), shapes)["fraction_vs_ft"] == 1.0
    plan = apply_freeze_plan(list(shapes), DESK_CONFIG)
    one = sorted(plan.lora_targets)[0]
    ledger = count_trainable(plan, shapes, {one: (32, 32, 3)})
    assert ledger["lora"] == 3 * (32 + 32)


def test_monotone_in_budget():
    counts = []
    for policy in POLICIES:
        limit = DESK_CONFIG.n_groups if policy == "shallow_groups" else DESK_CONFIG.n_units
        row = []
        for budget in range(limit + 1):
            cfg = DESK_CONFIG.replace(rank=0)
            shapes = backbone_param_shapes(cfg)
            row.append(count_trainable(apply_freeze_plan(list(shapes), cfg, policy, budget), shapes)["trainable"])
        assert all(a >= b for a, b in zip(row, row[1:]))
        counts.append(row)


def test_unclassified_parameter_is_an_error():
    shapes = backbone_param_shapes(DESK_CONFIG)
    plan = apply_freeze_plan(list(shapes), DESK_CONFIG)
    with pytest.raises(KeyError):
        count_trainable(plan, {**shapes, "mystery.weight": (3, 3)})
    with pytest.raises(KeyError):
        count_trainable(plan, shapes, {"up.out": (8, 3, 1)})


def test_zero_init_equivalence_whole_model():
    cfg = DESK_CONFIG.replace(use_fda=0)
    base = DualDomainNet.initialize(cfg.replace(m_sta=0, rank=0), seed=3)
    for t in base.params.values():
        t.data = t.data + np.random.default_rng(4).standard_normal(t.shape).astype(np.float32) * 0.05
    adapted = DualDomainNet.from_pretrained(base, cfg, seed=5)
    assert adapted.adapters
    x = np.random.default_rng(6).random((2, 3, 12, 12)).astype(np.float32)
    a, _ = adapted.predict(x)
    b, _ = base.predict(x)
    assert np.abs(a - b).max() < 1e-6


def test_merge_equivalence_whole_model():
    cfg = DESK_CONFIG.replace(n_units=2, m_sta=1)
    net = DualDomainNet.initialize(cfg, seed=7)
    rng = np.random.default_rng(8)
    for a in net.adapters.values():
        a.up.data = rng.standard_normal(a.up.shape).astype(np.float32) * 0.05
    merged = net.merged()
    assert not merged.adapters and merged.config.rank == 0
    x = rng.random((100, 3, 8, 8)).astype(np.float32)
    a, _ = net.predict(x, batch=25)
    b, _ = merged.predict(x, batch=25)
    assert np.abs(a - b).max() < 1e-5


def test_create_adapters_covers_targets():
    cfg = DESK_CONFIG
    net = DualDomainNet.initialize(cfg, seed=0)
    assert set(net.adapters) == set(net.plan.lora_targets)
    again = create_adapters(net.plan, net.params, cfg, np.random.default_rng([0, 1]))
    for k in again:
        assert np.array_equal(again[k].down.data, net.adapters[k].down.data)
        assert not again[k].up.data.any()


def test_rank_zero_config_has_no_adapters():
    cfg = ModelConfig(rank=0)
    net = DualDomainNet.initialize(cfg, seed=0)
    assert net.adapters == {} and net.ledger()["lora"] == 0
