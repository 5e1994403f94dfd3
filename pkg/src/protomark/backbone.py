"""Three-level encoder-decoder producing the composite full-resolution feature map."""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError


def _groups(channels: int, max_groups: int = 4) -> int:
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


class ConvBlock(nn.Module):
    """conv3x3(stride) -> GN -> SiLU -> conv3x3 -> GN -> SiLU.

    SiLU rather than ReLU keeps the network smooth, so finite-difference checks
    are not spoiled by kinks.
    """

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


class Context(nn.Module):
    """Residual dilated 3x3 convs; widens the receptive field at the bottleneck."""

    def __init__(self, channels, dilations=(2, 4, 8)):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=d, dilation=d) for d in dilations)
        self.norms = nn.ModuleList(nn.GroupNorm(_groups(channels), channels) for _ in dilations)

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = x + F.silu(norm(conv(x)))
        return x


class Up(nn.Module):
    def __init__(self, channels, mode="nearest"):
        super().__init__()
        self.mode = mode
        if mode == "transposed":
            self.deconv = nn.ConvTranspose2d(channels, channels, 2, stride=2)

    def forward(self, x):
        if self.mode == "transposed":
            return self.deconv(x)
        return F.interpolate(x, scale_factor=2, mode="nearest")


class Backbone(nn.Module):
    """U-Net shaped feature extractor.

    Encoder levels run at 1, 1/2 and 1/4 resolution with base, 2*base and
    4*base channels; a residual dilated context block follows the 1/4-res
    encoder so distant anatomy can disambiguate look-alike landmarks. Three 1x1 heads read out F1 (1/4 res, D1 channels, from the
    bottleneck), F2 (1/2 res, D2, first decoder level) and F3 (full res, D3, last
    decoder level). F1 and F2 are bilinearly up-sampled and the output is
    ``concat(up(F1), up(F2), F3)`` in channel-first layout (N, D, H, W).
    """

    def __init__(self, widths=(64, 32, 16), base_width=16, upsample_mode="nearest", context_dilations=(2, 4, 8)):
        super().__init__()
        d1, d2, d3 = widths
        c1, c2, c3 = base_width, 2 * base_width, 4 * base_width
        self.widths = tuple(widths)
        self.enc1 = ConvBlock(1, c1)
        self.enc2 = ConvBlock(c1, c2, stride=2)
        self.enc3 = ConvBlock(c2, c3, stride=2)
        self.context = Context(c3, context_dilations)
        self.up2 = Up(c3, upsample_mode)
        self.dec2 = ConvBlock(c3 + c2, c2)
        self.up1 = Up(c2, upsample_mode)
        self.dec1 = ConvBlock(c2 + c1, c1)
        self.head1 = nn.Conv2d(c3, d1, 1)
        self.head2 = nn.Conv2d(c2, d2, 1)
        self.head3 = nn.Conv2d(c1, d3, 1)

    @property
    def feature_dim(self):
        return sum(self.widths)

    def levels(self, x):
        """Return (F1, F2, F3) at their native resolutions."""
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.context(self.enc3(e2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head1(e3), self.head2(d2), self.head3(d1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"input size {h}x{w} must be divisible by 4")
        f1, f2, f3 = self.levels(x)
        up = dict(size=(h, w), mode="bilinear", align_corners=False)
        return torch.cat([F.interpolate(f1, **up), F.interpolate(f2, **up), f3], dim=1)


def init_backbone(cfg, seed: int, dtype=torch.float32) -> Backbone:
    """Build a backbone with fan-in scaled normal weights drawn from ``seed``."""
    net = Backbone(cfg.widths, cfg.base_width, cfg.upsample_mode, cfg.context_dilations)
    reset_parameters(net, seed, cfg.head_init_gain)
    return net.to(dtype)


def _init_gain(name: str, head_gain: float) -> float:
    """Variance gain (times 1/fan_in) for the layer called ``name``.

    Similarity maps are quadratic in the feature read-outs, so those (and the
    relation head's output projection, which regresses onto prototypes) start
    scaled down by ``head_gain``; SiLU-fed hidden layers use the He gain.
    """
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("head") or name.endswith("head.out"):
        return head_gain**2
    if leaf in ("q", "k", "v", "fc2"):
        return 1.0
    return 2.0


def reset_parameters(module: nn.Module, seed: int, head_gain: float = 1.0):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in module.named_modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = m.weight
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * w[0, 0].numel()
                else:
                    fan_in = w[0].numel()
                std = math.sqrt(_init_gain(name, head_gain) / fan_in)
                w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def extract_features(net: Backbone, img) -> torch.Tensor:
    """Composite feature map for one (H, W) image or an (N, H, W) / (N, 1, H, W) batch.

    A single image yields (D, H, W); a batch yields (N, D, H, W).
    """
    x = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img)
    x = x.to(next(net.parameters()).dtype)
    single = x.ndim == 2
    if single:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected a grayscale image or batch, got shape {tuple(x.shape)}")
    out = net(x)
    return out[0] if single else out
