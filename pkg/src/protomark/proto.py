"""Landmark prototypes: heatmap-weighted pooling, the EMA bank, and similarity maps."""

from dataclasses import dataclass, field

import torch

from .core import ProtomarkError, ShapeError


class DegenerateHeatmapError(ProtomarkError, ValueError):
    pass


def instance_prototypes(feats: torch.Tensor, heatmaps: torch.Tensor) -> torch.Tensor:
    """Heatmap-weighted average of feature vectors, one per landmark.

    feats: (D, H, W) or (N, D, H, W); heatmaps: (K, H, W) or (N, K, H, W).
    Returns (K, D) or (N, K, D).
    """
    heatmaps = torch.as_tensor(heatmaps, dtype=feats.dtype)
    if feats.ndim != heatmaps.ndim or feats.shape[-2:] != heatmaps.shape[-2:] or feats.shape[:-3] != heatmaps.shape[:-3]:
        raise ShapeError(f"feature map {tuple(feats.shape)} and heatmaps {tuple(heatmaps.shape)} disagree")
    mass = heatmaps.sum(dim=(-2, -1))
    if (mass <= 0).any():
        k = int(torch.nonzero(mass <= 0)[0, -1])
        raise DegenerateHeatmapError(f"heatmap channel {k} has zero mass")
    pooled = torch.einsum("...khw,...dhw->...kd", heatmaps, feats)
    return pooled / mass[..., None]


def similarity_maps(protos: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Plain dot product of each prototype (K, D) with every feature vector.

    feats (D, H, W) -> (K, H, W); feats (N, D, H, W) -> (N, K, H, W).
    """
    if protos.ndim != 2 or protos.shape[1] != feats.shape[-3]:
        raise ShapeError(f"prototypes {tuple(protos.shape)} do not match feature dim of {tuple(feats.shape)}")
    return torch.einsum("kd,...dhw->...khw", protos, feats)


@dataclass
class PrototypeBank:
    """Running holistic prototypes. A buffer, never a learnable parameter."""

    num_landmarks: int
    dim: int
    alpha: float = 0.99
    step: int = 0
    initialized: bool = False
    holistic: torch.Tensor = field(default=None)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.holistic is None:
            self.holistic = torch.zeros(self.num_landmarks, self.dim, dtype=torch.float64)

    def update(self, batch_protos) -> "PrototypeBank":
        return ema_update(self, batch_protos)

    def state_dict(self):
        return {"holistic": self.holistic.clone(), "alpha": self.alpha,
                "step": self.step, "initialized": self.initialized}

    @classmethod
    def from_state_dict(cls, sd):
        h = sd["holistic"]
        return cls(h.shape[0], h.shape[1], sd["alpha"], sd["step"], sd["initialized"], h.clone())


@torch.no_grad()
def ema_update(bank: PrototypeBank, batch_protos) -> PrototypeBank:
    """One momentum step toward the batch-mean instance prototypes (in place).

    The first call seeds the bank with the batch mean instead of blending with
    the all-zero start.
    """
    if isinstance(batch_protos, (list, tuple)):
        if not batch_protos:
            raise ValueError("empty prototype batch")
        batch_protos = torch.stack([torch.as_tensor(p) for p in batch_protos])
    p = batch_protos.detach()
    if p.ndim == 2:
        p = p[None]
    if p.shape[0] == 0:
        raise ValueError("empty prototype batch")
    if p.shape[1:] != (bank.num_landmarks, bank.dim):
        raise ShapeError(f"batch prototypes {tuple(p.shape[1:])} do not match bank ({bank.num_landmarks}, {bank.dim})")
    mean = p.mean(dim=0).to(bank.holistic.dtype)
    if not bank.initialized:
        bank.holistic = mean.clone()
        bank.initialized = True
    else:
        bank.holistic = bank.alpha * bank.holistic + (1 - bank.alpha) * mean
    bank.step += 1
    return bank
