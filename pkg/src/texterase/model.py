"""End-to-end generator: encoder + decoder, plus the pretraining heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .decoder import Decoder
from .encoder import Encoder
from .segmim import MimMask, ReconHead, SegHead, apply_mask, token_mask


def init_weights(module: nn.Module) -> None:
    """Truncated-normal transformer weights, fan-in normal convs."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in",
                                    nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Eraser(nn.Module):
    """One-stage text eraser; also hosts the pretraining heads so that both
    phases share one checkpointable module."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.seg_head = SegHead(cfg.enc_channels[3])
        self.recon_head = ReconHead(cfg.dec_channels[4])
        init_weights(self)

    def forward(self, image: torch.Tensor, training: bool = False) -> dict:
        """Erase text. Returns {"image": ...} plus aux outputs when training."""
        feats = self.encoder(image)
        out = self.decoder(feats, training=training)
        out["enc_feats"] = feats
        return out

    def forward_pretrain(self, image: torch.Tensor, m: MimMask) -> dict:
        """Masked forward with both pretraining heads."""
        masked = apply_mask(image, m)
        tmask = token_mask(m).to(image.device)
        feats = self.encoder(masked, token_mask=tmask)
        dec = self.decoder(feats, training=False)
        return {
            "seg": self.seg_head(feats[3]),
            "recon": self.recon_head(dec["feats"][4]),
            "masked_image": masked,
        }

    def forward_seg_only(self, image: torch.Tensor) -> torch.Tensor:
        """Encoder-finetune path: segmentation from the encoder alone,
        no mask token, decoder untouched."""
        feats = self.encoder(image)
        return self.seg_head(feats[3])
