"""
Measuring representational drift with CKNNA
===========================================

Text features that pass through many blocks drift away from the encoder
output. CKNNA compares the nearest-neighbour structure of each layer with
layer 0; a shared PCA basis puts all layers on one set of axes.
"""

import numpy as np

from reinjectr import CknnaConfig, FeatureStack, drift_report

# %%
# A stack where every layer adds more independent noise to the same tokens.
rng = np.random.default_rng(0)
base = rng.standard_normal((300, 24))
layers = tuple(base + 0.2 * l * rng.standard_normal(base.shape) for l in range(10))
stack = FeatureStack(layers=layers)

# %%
# Scores start at 1 (layer 0 against itself) and fall as neighbourhoods scramble.
report = drift_report(stack, CknnaConfig(k=10), q=2)
for layer, score, centroid in zip(report.layer_ids, report.scores, report.centroids):
    print(f"layer {layer}: cknna {score:.3f}  centroid ({centroid[0]:+.2f}, {centroid[1]:+.2f})")

# %%
# Chance level for independent features is roughly k / (N - 1).
print("chance level", 10 / (base.shape[0] - 1))
