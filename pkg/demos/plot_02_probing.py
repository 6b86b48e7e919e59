"""
Layer-wise recoverability probes
================================

A small MLP is trained on every layer with one fixed protocol. Its test
accuracy at predicting each token's linguistic category is that layer's
recoverability.
"""

import numpy as np

from reinjectr import ProbeConfig, build_corpus, geneval_like_prompts, probe_curve, synthetic_drift_stack

# %%
# 553 templated prompts, split 499 / 54. Words longer than six characters are
# split in two and both halves keep the word's label.
corpus = build_corpus(geneval_like_prompts(553, seed=0), train_count=499, test_count=54, seed=0)
print(corpus.n_tokens, "tokens;", corpus.prompts[0])

# %%
# Controlled forgetting: every layer is the class centroid plus noise that
# grows with depth, so recoverability must decline.
stack = synthetic_drift_stack(corpus.token_labels(), n_layers=8, drift=0.5)
curve = probe_curve(stack, corpus, ProbeConfig(epochs=20))
for layer, acc in zip(curve.layer_ids, curve.overall):
    print(f"layer {layer}: accuracy {acc:.3f}")

# %%
# Per-category view of the deepest layer.
print({name: round(v, 3) for name, v in curve.per_category[-1].items()})
