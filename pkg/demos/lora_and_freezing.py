"""
Freezing plans and low-rank adapters
====================================

Count trainable parameters for each freezing policy at full size, then show
that a zero-initialized adapter changes nothing and a merged adapter costs
nothing at inference.
"""

import numpy as np

from ddsr.adaptation import apply_freeze_plan, count_trainable
from ddsr.backbone import DESK_CONFIG, PAPER_CONFIG, POLICIES, backbone_param_shapes
from ddsr.model import DualDomainNet

shapes = backbone_param_shapes(PAPER_CONFIG)
print(f"full fine-tuning with the full-size preset: {sum(int(np.prod(s)) for s in shapes.values()):,} parameters")
# budget 5 means five units per group, or five whole groups for shallow_groups
budget = 5
for policy in POLICIES:
    plan = apply_freeze_plan(list(shapes), PAPER_CONFIG, policy, budget)
    lora = {t: (PAPER_CONFIG.dim, PAPER_CONFIG.dim, PAPER_CONFIG.rank) for t in plan.lora_targets}
    ledger = count_trainable(plan, shapes, lora)
    print(f"  {policy:<24} budget {budget}: trainable {ledger['trainable']:>10,}"
          f"  fraction {ledger['fraction_vs_ft']:.3f}")

# desk-size model, adapters on the query/value projections of frozen units
base = DualDomainNet.initialize(DESK_CONFIG.replace(m_sta=0, rank=0, use_fda=0), seed=1)
adapted = DualDomainNet.from_pretrained(base, DESK_CONFIG.replace(use_fda=0), seed=1)
lr = np.random.default_rng(2).random((2, 3, 16, 16)).astype(np.float32)
print("zero-init adapters, max output change:", np.abs(adapted.predict(lr)[0] - base.predict(lr)[0]).max())

# pretend training moved the adapters, then fold them into the base weights
for a in adapted.adapters.values():
    a.up.data = np.random.default_rng(3).standard_normal(a.up.shape).astype(np.float32) * 0.05
merged = adapted.merged()
print("adapters after merge:", len(merged.adapters))
print("merged vs unmerged, max output change:", np.abs(merged.predict(lr)[0] - adapted.predict(lr)[0]).max())
print("ledger:", adapted.ledger())
