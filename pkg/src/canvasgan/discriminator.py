"""Text-conditioned discriminator.

The image is downsampled by stride-2 conv blocks to 4×4, refined by a residual
branch, concatenated with the spatially replicated sentence vector, fused by a
1×1 and a 3×3 convolution and averaged into one relevance logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from canvasgan.config import DiscriminatorConfig
from canvasgan.errors import ShapeMismatch
from canvasgan.generator import ResidualBlock

FEATURE_SIZE = 4
PROB_EPS = 1e-7


def replicate_text(h_f: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
    """Copy a (B, d) or (d,) text vector to every location of an h × w grid.

    Channel-first like the image features: (B, d, h, w) or (d, h, w).
    """
    h, w = spatial
    return h_f.unsqueeze(-1).unsqueeze(-1).expand(*h_f.shape, h, w)


@dataclass
class DiscriminatorOutput:
    probability: torch.Tensor  # (B,) in (0, 1)
    logit: torch.Tensor        # (B,)
    features: torch.Tensor     # (B, C, 4, 4) fused map


class Discriminator(nn.Module):
    def __init__(self, image_size: int, text_dim: int, cfg: DiscriminatorConfig) -> None:
        super().__init__()
        self.image_size = image_size
        self.text_dim = text_dim
        n_down = int(round(math.log2(image_size // FEATURE_SIZE)))
        layers: list[nn.Module] = []
        in_ch, ch = 3, cfg.base_channels
        for _ in range(n_down):
            layers += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.LeakyReLU(cfg.leaky_slope)]
            in_ch, ch = ch, ch * 2
        self.downsample = nn.Sequential(*layers)
        self.residual = ResidualBlock(in_ch, slope=cfg.leaky_slope)
        self.fuse = nn.Sequential(nn.Conv2d(in_ch + text_dim, in_ch, 1), nn.LeakyReLU(cfg.leaky_slope))
        self.head = nn.Conv2d(in_ch, 1, 3, padding=1)

    def forward(self, images: torch.Tensor, h_f: torch.Tensor) -> DiscriminatorOutput:
        s = self.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise ShapeMismatch(f"expected (B, 3, {s}, {s}) images, got {tuple(images.shape)}")
        if h_f.shape != (images.shape[0], self.text_dim):
            raise ShapeMismatch(f"expected ({images.shape[0]}, {self.text_dim}) text, got {tuple(h_f.shape)}")
        feats = self.residual(self.downsample(images))
        text = replicate_text(h_f, (feats.shape[2], feats.shape[3]))
        fused = self.fuse(torch.cat([feats, text], dim=1))
        logit = self.head(fused).mean(dim=(1, 2, 3))
        prob = torch.sigmoid(logit).clamp(PROB_EPS, 1 - PROB_EPS)
        return DiscriminatorOutput(probability=prob, logit=logit, features=fused)


def discriminate(image: torch.Tensor, h_f: torch.Tensor, d: Discriminator) -> DiscriminatorOutput:
    """Score one (3, H, W) image against one text vector, or a batch of each."""
    if image.dim() == 3:
        return d(image.unsqueeze(0), h_f.unsqueeze(0))
    return d(image, h_f)
