"""
Procrustes alignment and anchored reinjection
=============================================

Shallow features are layer-normalized, rotated into the target layer's frame
and added to the normalized target; the target's per-token statistics are
then restored.
"""

import numpy as np

from reinjectr import (
    ProbeConfig,
    apply_plan,
    build_corpus,
    calibrate_rotation,
    calibrate_rotation_map,
    geneval_like_prompts,
    plan_layers,
    probe_curve,
    synthetic_drift_stack,
    token_stats,
)
from reinjectr.reinject import anchored_inject

# %%
# A planted rotation is recovered from paired features.
rng = np.random.default_rng(0)
x = rng.standard_normal((500, 16))
q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
r = calibrate_rotation(x, x @ q, check_normalized=False)
print("|R - Q| =", np.linalg.norm(r - q))

# %%
# Anchoring keeps each token's mean and spread whatever the weight.
t_ori, t_tgt = 3 * rng.standard_normal((2, 8, 16))
plan = plan_layers(3, 0, weight=0.1, rotation_enabled=False)
out = anchored_inject(t_ori, t_tgt, plan)
print("std before", token_stats(t_tgt).std[:3], "after", token_stats(out).std[:3])

# %%
# On a drifting stack, reinjecting layer 1 into every deeper layer lifts
# deep-layer probe accuracy back up.
corpus = build_corpus(geneval_like_prompts(553, seed=0), seed=0)
stack = synthetic_drift_stack(corpus.token_labels(), n_layers=8, drift=0.5)
plan = plan_layers(stack.n_layers, 1, weight=1.0)
rmap = calibrate_rotation_map(stack, 1, plan.target_layers)
cfg = ProbeConfig(epochs=20)
before = probe_curve(stack, corpus, cfg).overall
after = probe_curve(apply_plan(stack, plan, rmap), corpus, cfg).overall
for layer, (a, b) in enumerate(zip(before, after)):
    print(f"layer {layer}: {a:.3f} -> {b:.3f}")
