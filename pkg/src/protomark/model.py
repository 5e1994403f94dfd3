"""Bundle of every trainable piece: backbone, positional embedder, relation head."""

import torch
import torch.nn as nn

from .backbone import Backbone, reset_parameters
from .relmine import PositionalEmbedder, RelationHead


class LandmarkNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.feature_dim
        self.backbone = Backbone(cfg.widths, cfg.base_width, cfg.upsample_mode, cfg.context_dilations)
        self.embedder = PositionalEmbedder(d, cfg.mlp_hidden)
        self.head = RelationHead(d, cfg.msa_heads)

    def forward(self, images):
        return self.backbone(images)


def build_model(cfg, seed: int | None = None, dtype=torch.float32) -> LandmarkNet:
    net = LandmarkNet(cfg)
    reset_parameters(net, cfg.seed if seed is None else seed, cfg.head_init_gain)
    return net.to(dtype)
