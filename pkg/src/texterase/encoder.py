"""Four-stage hierarchical encoder: strides {4, 8, 16, 32}."""

from __future__ import annotations

import torch
import torch.nn as nn

from .blocks import build_stage
from .config import ModelConfig

# Images in [0,1] are shifted/scaled to mean 0.5, std 0.5 per channel.
INPUT_MEAN = 0.5
INPUT_STD = 0.5


def normalize_input(image: torch.Tensor) -> torch.Tensor:
    return (image - INPUT_MEAN) / INPUT_STD


class PatchEmbed(nn.Module):
    """Flatten each d x d patch and project with a 1x1 conv, then layer norm.

    Input/output are (B, H, W, C) maps; spatial size shrinks by ``d``.
    """

    def __init__(self, in_channels: int, d: int, out_channels: int):
        super().__init__()
        self.d = d
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.proj = nn.Linear(d * d * in_channels, out_channels, bias=True)
        self.norm = nn.LayerNorm(out_channels)

    def flatten_patches(self, feat: torch.Tensor) -> torch.Tensor:
        B, H, W, C = feat.shape
        d = self.d
        if H % d or W % d:
            raise ValueError(f"spatial size {H}x{W} not divisible by d={d}")
        x = feat.view(B, H // d, d, W // d, d, C)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H // d, W // d, d * d * C)

    def forward(self, feat: torch.Tensor, skip_norm: bool = False) -> torch.Tensor:
        if feat.shape[-1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} channels, got {feat.shape[-1]}")
        x = self.proj(self.flatten_patches(feat))
        return x if skip_norm else self.norm(x)


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, d: int, depth: int,
                 heads: int, cfg: ModelConfig, sra_reduction: int):
        super().__init__()
        self.embed = PatchEmbed(in_channels, d, out_channels)
        self.blocks = build_stage(out_channels, depth, heads, cfg.block_type,
                                  cfg.window_size, cfg.ffn_expansion,
                                  sra_reduction=sra_reduction)

    def forward(self, x, mask_token_fn=None):
        x = self.embed(x)
        if mask_token_fn is not None:
            x = mask_token_fn(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(nn.Module):
    """Maps a (B, 3, H, W) image in [0,1] to four (B, H_i, W_i, C_i) maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList()
        in_ch = 3
        for i in range(4):
            d = 4 if i == 0 else 2
            # PVT halves the KV reduction each stage (8, 4, 2, 1 by default).
            sra = max(1, cfg.sra_reduction // (2 ** i)) if cfg.block_type == "pvt" else 1
            self.stages.append(EncoderStage(
                in_ch, cfg.enc_channels[i], d, cfg.enc_depths[i],
                cfg.enc_heads[i], cfg, sra))
            in_ch = cfg.enc_channels[i]
        # Learnable token substituted at masked positions during pretraining.
        self.mask_token = nn.Parameter(torch.zeros(cfg.enc_channels[0]))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, image: torch.Tensor, token_mask: torch.Tensor | None = None):
        """token_mask: (B, H/4, W/4) bool/0-1 grid of masked stage-1 tokens.

        Returns [f1, f2, f3, f4] at strides 4, 8, 16, 32.
        """
        B, C, H, W = image.shape
        if C != 3:
            raise ValueError(f"expected 3-channel image, got {C}")
        if H != self.cfg.input_size or W != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}px input, got {H}x{W}")
        x = normalize_input(image).permute(0, 2, 3, 1)  # B, H, W, 3
        feats = []
        mask_fn = None
        if token_mask is not None:
            def mask_fn(tokens, m=token_mask):
                m = m.to(tokens.dtype).unsqueeze(-1)
                return tokens * (1 - m) + self.mask_token.to(tokens.dtype) * m
        for i, stage in enumerate(self.stages):
            x = stage(x, mask_token_fn=mask_fn if i == 0 else None)
            feats.append(x)
        return feats
