"""Five-stage upsampling decoder with lateral connections and aux heads."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .blocks import build_stage
from .config import ModelConfig


class PatchSplit(nn.Module):
    """Inverse of patch embedding: each token becomes a 2x2 patch of
    c_in/4-dim vectors (row-major a b / c d), then a 1x1 conv maps to c_out."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels % 4:
            raise ValueError(f"in_channels {in_channels} not divisible by 4")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.proj = nn.Linear(in_channels // 4, out_channels, bias=True)

    def expand(self, feat: torch.Tensor) -> torch.Tensor:
        B, H, W, C = feat.shape
        x = feat.view(B, H, W, 2, 2, C // 4)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, C // 4)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[-1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} channels, got {feat.shape[-1]}")
        return self.proj(self.expand(feat))


class LateralConnection(nn.Module):
    """Encoder skip: 1x1 conv (c) -> 3x3 conv (2c) -> 3x3 conv (2c) -> 3x3
    conv (c), ReLU after the first three, added to the decoder feature."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(c, c, 1),
            nn.Conv2d(c, 2 * c, 3, padding=1),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.Conv2d(2 * c, c, 3, padding=1),
        ])

    def forward(self, f_enc: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
        if f_enc.shape != f_dec.shape:
            raise ValueError(f"lateral shape mismatch: {tuple(f_enc.shape)} "
                             f"vs {tuple(f_dec.shape)}")
        x = f_enc.permute(0, 3, 1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 3:
                x = F.relu(x)
        return f_dec + x.permute(0, 2, 3, 1)


class MaskHead(nn.Module):
    """Text-box segmentation head on f4 (stride 2): spectral-norm 3x3
    stride-2 deconv to 64ch full resolution, ReLU, 3x3 conv, sigmoid."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.deconv = spectral_norm(nn.ConvTranspose2d(
            in_channels, 64, 3, stride=2, padding=1, output_padding=1))
        self.conv = nn.Conv2d(64, 1, 3, padding=1)

    def forward(self, f4: torch.Tensor) -> torch.Tensor:
        x = f4.permute(0, 3, 1, 2)
        x = F.relu(self.deconv(x))
        return torch.sigmoid(self.conv(x))


class Decoder(nn.Module):
    """Produces f1..f5 at strides 16, 8, 4, 2, 1 plus the erased image.

    Training mode additionally returns half/quarter-scale erased images and
    the text-box mask logit map.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims = (cfg.enc_channels[3],) + cfg.dec_channels[:4]  # block dims per stage
        self.stages = nn.ModuleList()
        self.splits = nn.ModuleList()
        for i in range(5):
            sra = cfg.dec_last_sra_reduction if (cfg.block_type == "pvt" and i == 4) \
                else (max(1, cfg.sra_reduction // (2 ** (4 - i - 1)))
                      if cfg.block_type == "pvt" and i < 4 else 1)
            ffn = cfg.dec_last_ffn_expansion if i == 4 else cfg.ffn_expansion
            self.stages.append(nn.ModuleList(build_stage(
                dims[i], cfg.dec_depths[i], cfg.dec_heads[i], cfg.block_type,
                cfg.window_size, ffn, sra_reduction=sra)))
            self.splits.append(PatchSplit(dims[i], cfg.dec_channels[i]))
        # Encoder f3, f2, f1 (strides 16, 8, 4) feed decoder stage outputs
        # f1, f2, f3 — i.e. the inputs of stages 2, 3, 4.
        self.laterals = nn.ModuleList([
            LateralConnection(cfg.enc_channels[2]),
            LateralConnection(cfg.enc_channels[1]),
            LateralConnection(cfg.enc_channels[0]),
        ])
        self.out_head = nn.Conv2d(cfg.dec_channels[4], 3, 3, padding=1)
        self.out_head_half = nn.Conv2d(cfg.dec_channels[3], 3, 3, padding=1)
        self.out_head_quarter = nn.Conv2d(cfg.dec_channels[2], 3, 3, padding=1)
        self.mask_head = MaskHead(cfg.dec_channels[3])

    def forward(self, enc_feats, training: bool = False):
        f1e, f2e, f3e, f4e = enc_feats
        if f4e.shape[-1] != self.cfg.enc_channels[3]:
            raise ValueError(
                f"encoder output has {f4e.shape[-1]} channels, config expects "
                f"{self.cfg.enc_channels[3]}")
        skips = [f3e, f2e, f1e]
        x = f4e
        feats = []
        for i in range(5):
            for blk in self.stages[i]:
                x = blk(x)
            x = self.splits[i](x)
            if i < 3:
                # stride sanity: enc skip and decoder map must match exactly
                x = self.laterals[i](skips[i], x)
            feats.append(x)
        out = self.out_head(feats[4].permute(0, 3, 1, 2))
        result = {"feats": feats, "image": out}
        if training:
            result["image_half"] = self.out_head_half(feats[3].permute(0, 3, 1, 2))
            result["image_quarter"] = self.out_head_quarter(feats[2].permute(0, 3, 1, 2))
            result["mask"] = self.mask_head(feats[3])
        return result
