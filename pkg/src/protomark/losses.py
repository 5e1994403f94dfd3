"""Training objectives."""

from dataclasses import dataclass

import torch

from .core import ShapeError


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} disagree")


def loss_reg(sim: torch.Tensor, heat: torch.Tensor) -> torch.Tensor:
    """(1/K) sum_k ||S_k - H_k||^2 summed over pixels.

    Accepts (K, H, W) or a batch (N, K, H, W); batches are averaged over N.
    """
    heat = torch.as_tensor(heat, dtype=sim.dtype)
    _check_same(sim, heat, "loss_reg")
    per_image = ((sim - heat) ** 2).sum(dim=(-2, -1)).mean(dim=-1)
    return per_image.mean()


def loss_align(protos) -> torch.Tensor:
    """Mean over unordered pairs (m, n) of (1/K) sum_k ||p_mk - p_nk||^2.

    ``protos`` is (B, K, D) or a list of (K, D) sets with B >= 2.
    """
    if isinstance(protos, (list, tuple)):
        shapes = {tuple(p.shape) for p in protos}
        if len(shapes) > 1:
            raise ShapeError(f"loss_align: prototype sets have differing shapes {sorted(shapes)}")
        protos = torch.stack(list(protos))
    if protos.ndim != 3:
        raise ShapeError(f"loss_align expects (B, K, D), got {tuple(protos.shape)}")
    b = protos.shape[0]
    if b < 2:
        raise ValueError("loss_align needs at least two prototype sets")
    m, n = torch.triu_indices(b, b, offset=1)
    diff = protos[m] - protos[n]
    return (diff ** 2).sum(dim=-1).mean()


def loss_mine(p_hat: torch.Tensor, p: torch.Tensor, indices=None) -> torch.Tensor:
    """sum_k ||p_hat_k - p_k||^2 with ``p`` as a detached target.

    With ``indices`` only those rows enter the sum. A leading batch axis is
    averaged over.
    """
    _check_same(p_hat, p, "loss_mine")
    sq = ((p_hat - p.detach()) ** 2).sum(dim=-1)
    if indices is not None:
        sq = sq[..., list(indices)]
    total = sq.sum(dim=-1)
    return total.mean() if total.ndim else total


@dataclass
class LossBreakdown:
    reg: object
    align: object
    mine: object
    total: object
    lambda1: float
    lambda2: float

    def as_floats(self) -> "LossBreakdown":
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossBreakdown(f(self.reg), f(self.align), f(self.mine), f(self.total),
                             self.lambda1, self.lambda2)


def loss_total(reg, align, mine, lambda1: float = 1.0, lambda2: float = 3.0) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = reg + lambda1 * align + lambda2 * mine
    return LossBreakdown(reg, align, mine, total, lambda1, lambda2)
