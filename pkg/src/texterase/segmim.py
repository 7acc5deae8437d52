"""Masked-patch pretraining: random block masking, segmentation head on the
final encoder feature, reconstruction head on the final decoder feature."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn as nn

SEG_HEAD_DIM = 1024  # each 1024-vector becomes a 32x32 pixel patch
SEG_PATCH = 32


@dataclasses.dataclass(frozen=True)
class MimMask:
    mask: torch.Tensor  # (H, W) or (B, H, W) float {0,1}, 1 = masked
    patch: int
    ratio: float


def stack_masks(masks) -> MimMask:
    """Batch per-sample masks into one (B, H, W) mask."""
    return MimMask(mask=torch.stack([m.mask for m in masks]),
                   patch=masks[0].patch, ratio=masks[0].ratio)


def generate_mim_mask(h: int, w: int, ratio: float, patch: int,
                      seed: int) -> MimMask:
    """Uniform random choice without replacement of round(ratio * n_patches)
    patch-aligned blocks. Deterministic per seed."""
    if h % patch or w % patch:
        raise ValueError(f"size {h}x{w} not divisible by patch {patch}")
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    gh, gw = h // patch, w // patch
    n = gh * gw
    k = int(round(ratio * n))
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = rng.choice(n, size=k, replace=False)
    grid = np.zeros(n, dtype=np.float32)
    grid[chosen] = 1.0
    grid = torch.from_numpy(grid.reshape(gh, gw))
    mask = grid.repeat_interleave(patch, 0).repeat_interleave(patch, 1)
    return MimMask(mask=mask, patch=patch, ratio=ratio)


def _broadcast(mask: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError("mask/image size mismatch")
    if mask.dim() == 3 and image.dim() == 4:
        return mask.unsqueeze(1)  # (B, 1, H, W)
    return mask


def apply_mask(image: torch.Tensor, m: MimMask) -> torch.Tensor:
    """Zero out masked pixels; image: (B, 3, H, W) or (3, H, W)."""
    mask = _broadcast(m.mask.to(image.device, image.dtype), image)
    return image * (1 - mask)


def token_mask(m: MimMask) -> torch.Tensor:
    """Stage-1 (stride 4) token grid of the pixel mask, (..., H/4, W/4)."""
    return m.mask[..., ::4, ::4].clone()


class SegHead(nn.Module):
    """f4 (stride 32) -> 1x1 conv to 1024 -> reshape each vector to a 32x32
    patch -> sigmoid; output (B, 1, H, W)."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, SEG_HEAD_DIM, 1)

    def forward(self, f4: torch.Tensor) -> torch.Tensor:
        if f4.shape[-1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} channels, got {f4.shape[-1]}")
        B, h, w, _ = f4.shape
        x = self.proj(f4.permute(0, 3, 1, 2))  # B, 1024, h, w
        x = x.view(B, SEG_PATCH, SEG_PATCH, h, w)
        x = x.permute(0, 3, 1, 4, 2).reshape(B, 1, h * SEG_PATCH, w * SEG_PATCH)
        return torch.sigmoid(x)


class ReconHead(nn.Module):
    """Full-resolution decoder feature -> 3x3 conv -> recovered image."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 3, 3, padding=1)

    def forward(self, f5: torch.Tensor) -> torch.Tensor:
        return self.conv(f5.permute(0, 3, 1, 2))


def mim_loss(image: torch.Tensor, recon: torch.Tensor,
             m: MimMask) -> torch.Tensor:
    """Mean L1 over masked pixels only."""
    if image.shape != recon.shape:
        raise ValueError("mim_loss shape mismatch")
    mask = _broadcast(m.mask.to(image.device, image.dtype), image)
    channels = image.shape[-3]
    count = mask.sum() * channels
    if mask.dim() < image.dim():  # (H, W) mask under a batched image
        count = count * (image.numel() // (channels * mask.numel()))
    if count == 0:
        raise ValueError("no masked pixels")
    return ((image - recon).abs() * mask).sum() / count


def pretrain_loss(seg: torch.Tensor, seg_gt: torch.Tensor,
                  image: torch.Tensor, recon: torch.Tensor, m: MimMask):
    """Unweighted sum of dice and masked-reconstruction losses.

    Returns (total, dice part, mim part).
    """
    from .losses import dice_loss
    l_dice = dice_loss(seg, seg_gt)
    l_mim = mim_loss(image, recon, m)
    return l_dice + l_mim, l_dice, l_mim
