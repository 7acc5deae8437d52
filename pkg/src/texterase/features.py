"""Frozen perceptual feature extractor with three pooling taps.

By default a fixed random-weight conv stack in the VGG-16 layout (2-2-3 convs
per block, max-pool between blocks) at configurable width; random but frozen
deep features still define a valid perceptual metric for desk-scale work.
Externally trained weights in the container format can be loaded instead.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization

DEFAULT_BASE_CHANNELS = 16
DEFAULT_SEED = 0x5EED

_BLOCK_CONVS = (2, 2, 3)  # VGG-16 layout up to the third pooling layer


class FeatureExtractor(nn.Module):
    """Three tap maps at 1/2, 1/4, 1/8 resolution. Weights never train."""

    def __init__(self, base_channels: int = DEFAULT_BASE_CHANNELS,
                 seed: int = DEFAULT_SEED):
        super().__init__()
        self.base_channels = base_channels
        self.seed = seed
        blocks = []
        in_ch = 3
        ch = base_channels
        for n_convs in _BLOCK_CONVS:
            convs = []
            for _ in range(n_convs):
                convs.append(nn.Conv2d(in_ch, ch, 3, padding=1))
                in_ch = ch
            blocks.append(nn.ModuleList(convs))
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            with torch.no_grad():
                p.copy_(torch.empty_like(p).normal_(0, 0.05, generator=gen))
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def min_input_size(self) -> int:
        return 2 ** len(_BLOCK_CONVS)

    def forward(self, image: torch.Tensor):
        """image: (B, 3, H, W). Returns the three post-pool tap maps."""
        if min(image.shape[-2:]) < self.min_input_size:
            raise ValueError(
                f"input {tuple(image.shape[-2:])} smaller than minimum tap "
                f"size {self.min_input_size}")
        taps = []
        x = image
        for convs in self.blocks:
            for conv in convs:
                x = F.relu(conv(x))
            x = F.max_pool2d(x, 2)
            taps.append(x)
        return taps

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        serialization.save_file(path, arrays, meta={
            "kind": "feature_extractor", "seed": self.seed,
            "base_channels": self.base_channels})

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        arrays, meta = serialization.load_file(path)
        base = int(meta.get("base_channels",
                            arrays["blocks.0.0.weight"].shape[0]))
        ex = cls(base_channels=base, seed=int(meta.get("seed", DEFAULT_SEED)))
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        ex.load_state_dict(state)
        for p in ex.parameters():
            p.requires_grad_(False)
        return ex
