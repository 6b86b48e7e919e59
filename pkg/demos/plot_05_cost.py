"""
Overhead of reinjection per target block
========================================

Counts are analytic: one add per element, a few passes for normalization
and restoration, and one dense ``n x d`` by ``d x d`` product for the
rotation. Memory assumes 2-byte elements.
"""

from reinjectr import estimate_cost, preset_plan
from reinjectr.reinject import PRESETS

# %%
# 512 text tokens at width 1536, 28 steps with classifier-free guidance.
report = estimate_cost(512, 1536, 56, preset_plan("sd3"))
print(report.summary())

# %%
# The rotation term dominates; switching it off leaves a negligible overhead.
plain = estimate_cost(512, 1536, 56, preset_plan("sd3", rotation_enabled=False))
print(f"without rotation: relative FLOPs {plain.relative_flops:.5f}")

# %%
# Presets for the other backbones.
for name, p in PRESETS.items():
    rep = estimate_cost(512, p.width, 2 * p.steps, preset_plan(name))
    print(f"{name:5s} origin {p.origin:2d}  targets {p.targets}  relative FLOPs {rep.relative_flops:.4f}")
