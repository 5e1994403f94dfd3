"""Gaussian targets, argmax decoding and what the synthetic corpus looks like.

Run: python demos/01_heatmaps.py  (writes demo_heatmaps.png next to this file)
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protomark.heatmap import decode_landmarks, render_heatmaps
from protomark.synthgen import SynthConfig, generate_dataset

# One adult and one adolescent scan from the generator.
data = generate_dataset(SynthConfig(image_size=(128, 128), counts=(1, 1), seed=3))
adult, teen = data[0], data[1]
print("adult landmarks (x, y):\n", np.round(adult.landmarks, 1))

# The adolescent landmarks sit a few pixels off the shared template.
drift = np.linalg.norm(teen.landmarks - np.asarray(teen.meta["template"]), axis=1)
print("adolescent drift per landmark (px):", np.round(drift, 2))

# Peak-normalised Gaussians, one channel per landmark.
heat = render_heatmaps(adult.landmarks, 128, 128, sigma_px=3.0)
print("heatmap stack", heat.shape, "peak values", np.round(heat.max(axis=(1, 2)), 3))

# Decoding a target map gives back the rounded landmark location.
back = decode_landmarks(heat)
print("max decode error on exact targets (px):", np.abs(back - adult.landmarks).max().round(3))

fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
for ax, s, title in [(axes[0], adult, "adult"), (axes[1], teen, "adolescent")]:
    ax.imshow(s.image, cmap="gray")
    ax.scatter(*s.landmarks.T, s=12, c="r")
    ax.set_title(title)
axes[2].imshow(heat.max(axis=0), cmap="magma")
axes[2].set_title("max over heatmaps")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(Path(__file__).with_name("demo_heatmaps.png"), dpi=90)
