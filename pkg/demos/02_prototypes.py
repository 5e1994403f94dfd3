"""Instance prototypes, the EMA bank and similarity-map decoding.

Run: python demos/02_prototypes.py
"""
import numpy as np
import torch

from protomark.core import RunConfig
from protomark.heatmap import decode_landmarks, render_heatmaps
from protomark.model import build_model
from protomark.proto import PrototypeBank, ema_update, instance_prototypes, similarity_maps
from protomark.synthgen import SynthConfig, generate_dataset

torch.manual_seed(0)
cfg = RunConfig(image_size=(64, 64), base_width=8)
data = generate_dataset(SynthConfig(image_size=(64, 64), counts=(2, 2), seed=0))
net = build_model(cfg).eval()

imgs = torch.as_tensor(np.stack([s.image for s in data]), dtype=torch.float32)[:, None]
heat = torch.as_tensor(np.stack([render_heatmaps(s.landmarks, 64, 64, 2.0) for s in data]),
                       dtype=torch.float32)
with torch.no_grad():
    feats = net.backbone(imgs)                  # (N, D, H, W)
    protos = instance_prototypes(feats, heat)   # (N, K, D)
print("features", tuple(feats.shape), "instance prototypes", tuple(protos.shape))

# First update seeds the bank with the batch mean; later ones blend with alpha.
bank = PrototypeBank(cfg.num_landmarks, cfg.feature_dim, alpha=0.99)
ema_update(bank, protos)
print("seeded bank equals batch mean:", torch.allclose(bank.holistic, protos.mean(0).double()))
before = bank.holistic.clone()
ema_update(bank, protos * 2)
moved = (bank.holistic - before).norm() / (2 * protos.mean(0).double() - before).norm()
print(f"second step moves {float(moved):.3f} of the way toward 2x the batch mean (1 - alpha = 0.01)")

# An untrained network decodes noise, but the decode is scale free.
sims = similarity_maps(bank.holistic.float(), feats[0])
pred = decode_landmarks(sims)
same = np.array_equal(pred, decode_landmarks(similarity_maps(3.7 * bank.holistic.float(), feats[0])))
print("untrained prediction error (px):", np.linalg.norm(pred - data[0].landmarks, axis=1).mean().round(1))
print("decode unchanged by positive scaling of prototypes:", same)
