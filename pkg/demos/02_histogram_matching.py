"""
Turning a segmentation into a pseudo-image
==========================================

Labels get a flat gray level each. Those levels are then moved onto the
intensity distribution of the training videos by entropic optimal
transport, which is what makes the pseudo-video look like data before any
denoising happens.
"""

import numpy as np

from freeecho import ToyDatasetConfig, generate_toy_dataset, sinkhorn
from freeecho.pseudo import (dataset_intensity_histogram, histogram, labels_to_intensity, palette_of,
                             transport_remap, wasserstein1)

toy = generate_toy_dataset(ToyDatasetConfig(num_videos=32))
target = dataset_intensity_histogram(toy)            # 64 bins over [-1, 1]
print("dataset histogram mass in the darkest quarter:", target.masses[:16].sum().round(3))

video, seg = toy[0]
print("labels:", seg.label_set)

raw = labels_to_intensity(seg)                       # evenly spaced gray per label
src = histogram(raw, target.bin_edges)
plan = sinkhorn(src, target, epsilon=1e-3)
print(f"sinkhorn: {plan.iterations} iterations, marginal L1 error {plan.marginal_error:.1e}, "
      f"cost {plan.cost:.4f}")

# each occupied source bin goes to the mean target intensity it is coupled with
t = plan.barycentric_map()
for i in np.flatnonzero(~np.isnan(t)):
    print(f"  {src.centers[i]:+.3f} -> {t[i]:+.3f}")

remapped = transport_remap(raw, plan)
print("W1 to dataset histogram, raw:     ", round(wasserstein1(src, target), 4))
print("W1 to dataset histogram, remapped:", round(wasserstein1(histogram(remapped, target.bin_edges), target), 4))

# the remap is a per-label gray level, so the SDEdit baseline fed this palette
# would start from exactly the same pseudo-image
print("matched palette:", {k: round(v, 3) for k, v in palette_of(seg, remapped).items()})

# %%
# Smaller epsilon means a sharper, more deterministic remap.
for eps in (1e-1, 1e-2, 1e-3):
    p = sinkhorn(src, target, epsilon=eps)
    print(f"epsilon={eps:g}: cost {p.cost:.4f}, iterations {p.iterations}")
