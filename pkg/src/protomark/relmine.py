"""Masked prototype relation mining.

A fraction of one image's instance prototypes is zeroed, landmark positional
embeddings are added to every row, and a single multi-head self-attention
layer reconstructs the full set.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError


class PositionalEmbedder(nn.Module):
    """Two-layer MLP from normalized (x, y) coordinates to D-dim embeddings."""

    def __init__(self, dim: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, coords):
        return self.fc2(F.silu(self.fc1(coords)))


def encode_positions(emb: PositionalEmbedder, coords) -> torch.Tensor:
    """Embed (..., K, 2) coordinates that are already normalized to [0, 1]."""
    coords = torch.as_tensor(coords, dtype=emb.fc1.weight.dtype)
    if coords.shape[-1] != 2:
        raise ShapeError(f"coordinates must end in a length-2 axis, got {tuple(coords.shape)}")
    if (coords < 0).any() or (coords > 1).any():
        raise ValueError("positional coordinates must be normalized to [0, 1]")
    return emb(coords)


def normalize_coords(coords, height: int, width: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return coords / np.array([width - 1, height - 1], dtype=np.float64)


class RelationHead(nn.Module):
    """Single multi-head self-attention layer over K prototype tokens.

    Full attention, no feed-forward block, residual or normalization.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def attention(self, tokens):
        """Attention weights of shape (..., heads, K, K)."""
        q, k = self._split(self.q(tokens)), self._split(self.k(tokens))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        return scores.softmax(dim=-1)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-3, -2)

    def forward(self, tokens, return_attention=False):
        attn = self.attention(tokens)
        mixed = attn @ self._split(self.v(tokens))
        *lead, h, n, dh = mixed.shape
        out = self.out(mixed.transpose(-3, -2).reshape(*lead, n, h * dh))
        return (out, attn) if return_attention else out


def reconstruct_prototypes(head: RelationHead, masked: torch.Tensor, e_pos: torch.Tensor) -> torch.Tensor:
    if masked.shape != e_pos.shape or masked.shape[-1] != head.dim:
        raise ShapeError(
            f"masked prototypes {tuple(masked.shape)}, embeddings {tuple(e_pos.shape)} "
            f"and head dim {head.dim} disagree"
        )
    return head(masked + e_pos)


@dataclass(frozen=True)
class MaskSpec:
    masked_indices: tuple
    ratio: float


def mask_count(ratio: float, k: int) -> int:
    if ratio <= 0:
        return 0
    return int(min(max(math.floor(ratio * k + 0.5), 1), k - 1))


def draw_mask(k: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    n = mask_count(ratio, k)
    idx = np.sort(rng.choice(k, size=n, replace=False)) if n else np.empty(0, dtype=int)
    return MaskSpec(tuple(int(i) for i in idx), float(ratio))


def mask_prototypes(protos: torch.Tensor, ratio: float, rng: np.random.Generator):
    """Zero a random subset of rows of a (K, D) prototype set.

    Returns the masked copy (differentiable w.r.t. the kept rows) and the MaskSpec.
    """
    spec = draw_mask(protos.shape[-2], ratio, rng)
    return apply_mask(protos, spec.masked_indices), spec


def apply_mask(protos: torch.Tensor, indices) -> torch.Tensor:
    keep = torch.ones(protos.shape[-2], 1, dtype=protos.dtype)
    keep[list(indices)] = 0
    return protos * keep
