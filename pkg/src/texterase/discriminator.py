"""Mask-conditioned patch discriminator with spectral normalization.

Takes a text-erased image and the text-box mask (4 channels total); the mask
conditioning lets score-map positions judge erased regions locally while the
strided stack aggregates a global score in (-1, 1).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

CHANNELS = (64, 128, 256, 256, 256, 1)


class Discriminator(nn.Module):
    def __init__(self, channels=CHANNELS):
        super().__init__()
        self.convs = nn.ModuleList()
        in_ch = 4  # RGB + mask
        for out_ch in channels:
            self.convs.append(spectral_norm(
                nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2)))
            in_ch = out_ch

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """image: (B, 3, H, W); mask: (B, 1, H, W). Returns (B,) in (-1, 1)."""
        if image.shape[-2:] != mask.shape[-2:]:
            raise ValueError(
                f"image {tuple(image.shape[-2:])} and mask "
                f"{tuple(mask.shape[-2:])} sizes differ")
        x = torch.cat([image, mask], dim=1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.2)
        score = 2 * torch.sigmoid(x) - 1
        return score.mean(dim=(1, 2, 3))
