"""Masked prototype reconstruction with a single self-attention layer.

Run: python demos/03_relation_mining.py
"""
import numpy as np
import torch

from protomark.losses import loss_mine
from protomark.relmine import (PositionalEmbedder, RelationHead, encode_positions, mask_count,
                               mask_prototypes, reconstruct_prototypes)

k, d = 10, 16
rng = np.random.default_rng(0)
for r in (0.1, 0.3, 0.5, 0.7, 0.9):
    print(f"R={r}: {mask_count(r, k)} of {k} prototypes hidden")

protos = torch.randn(k, d)
masked, spec = mask_prototypes(protos, 0.7, rng)
print("masked rows:", spec.masked_indices)

coords = torch.rand(k, 2)
emb, head = PositionalEmbedder(d), RelationHead(d, heads=4)
e_pos = encode_positions(emb, coords)
p_hat, attn = head(masked + e_pos, return_attention=True)
print("attention shape", tuple(attn.shape), "row sums", attn.sum(-1).mean().item())

# A short fit: the head learns to fill in hidden prototypes from visible ones.
opt = torch.optim.Adam([*emb.parameters(), *head.parameters()], lr=1e-2)
for step in range(301):
    masked, spec = mask_prototypes(protos, 0.3, rng)
    loss = loss_mine(reconstruct_prototypes(head, masked, encode_positions(emb, coords)), protos)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 100 == 0:
        print(f"step {step:3d}  reconstruction loss {loss.item():.4f}")
