"""Transformer blocks on image-shaped feature maps.

All blocks take and return (B, H, W, C) tensors. Three families:

* ``swin``   — pre-norm, shifted-window dot-product attention with a learned
  relative-position bias table.
* ``swinv2`` — post-norm, shifted-window scaled-cosine attention with a
  log-spaced continuous relative-position bias MLP.
* ``pvt``    — pre-norm spatial-reduction attention (keys/values downsampled
  by a strided conv) over the full map.

Window blocks zero-pad non-divisible inputs up to a window multiple, mask the
padded tokens out of attention, and crop after merging.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def window_partition(feat: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nH * nW, window, window, C); H, W divisible by window."""
    if window <= 0:
        raise ValueError(f"window must be positive, got {window}")
    B, H, W, C = feat.shape
    if H % window or W % window:
        raise ValueError(f"feature size {H}x{W} not divisible by window {window}")
    x = feat.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window, window, C)


def window_merge(windows: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition. windows: (B*nH*nW, window, window, C)."""
    n, window, window_w, C = windows.shape
    if window != window_w:
        raise ValueError(f"windows must be square, got {window}x{window_w}")
    if h % window or w % window:
        raise ValueError(f"target size {h}x{w} not divisible by window {window}")
    per_image = (h // window) * (w // window)
    if n % per_image:
        raise ValueError(f"{n} windows inconsistent with {h}x{w}/window {window}")
    B = n // per_image
    x = windows.view(B, h // window, w // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, h, w, C)


def _relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(
        torch.arange(window), torch.arange(window), indexing="ij"))  # 2, w, w
    flat = coords.flatten(1)  # 2, w*w
    rel = flat[:, :, None] - flat[:, None, :]  # 2, w*w, w*w
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)  # w*w, w*w


def _log_relative_coords(window: int) -> torch.Tensor:
    # Log-spaced continuous relative coordinates (swinv2), scaled to [-1, 1]
    # then log1p-compressed.
    rng = torch.arange(-(window - 1), window, dtype=torch.float32)
    table = torch.stack(torch.meshgrid(rng, rng, indexing="ij"), dim=-1)  # 2w-1, 2w-1, 2
    if window > 1:
        table = table / (window - 1)
    table = table * 8
    table = torch.sign(table) * torch.log2(table.abs() + 1.0) / math.log2(8)
    return table  # (2w-1, 2w-1, 2)


class WindowAttention(nn.Module):
    """Multi-head attention within square windows, swin or swinv2 style."""

    def __init__(self, dim: int, heads: int, window: int, v2: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.v2 = v2
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.register_buffer("rel_index", _relative_position_index(window),
                             persistent=False)
        if v2:
            self.logit_scale = nn.Parameter(
                torch.log(10 * torch.ones(heads, 1, 1)))
            self.cpb_mlp = nn.Sequential(
                nn.Linear(2, 64, bias=True), nn.ReLU(inplace=True),
                nn.Linear(64, heads, bias=False))
            self.register_buffer("log_rel_coords", _log_relative_coords(window),
                                 persistent=False)
        else:
            self.rel_bias = nn.Parameter(
                torch.zeros((2 * window - 1) ** 2, heads))
            nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self.last_attn = None  # instrumentation hook, set when record_attn

    def _bias(self) -> torch.Tensor:
        n = self.window * self.window
        if self.v2:
            table = self.cpb_mlp(self.log_rel_coords)  # 2w-1, 2w-1, heads
            table = table.view(-1, self.heads)
            bias = table[self.rel_index.view(-1)].view(n, n, self.heads)
            bias = 16 * torch.sigmoid(bias)
        else:
            bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, self.heads)
        return bias.permute(2, 0, 1)  # heads, n, n

    def forward(self, x: torch.Tensor, mask=None, record_attn: bool = False):
        """x: (nW, n, C); mask: (nW/B groups, n, n) additive or None."""
        nW, n, C = x.shape
        qkv = self.qkv(x).view(nW, n, 3, self.heads, C // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # nW, heads, n, hd
        if self.v2:
            attn = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1)
            scale = torch.clamp(self.logit_scale, max=math.log(100.0)).exp()
            attn = attn * scale
        else:
            attn = (q * (C // self.heads) ** -0.5) @ k.transpose(-2, -1)
        attn = attn + self._bias().unsqueeze(0)
        if mask is not None:
            g = mask.shape[0]
            attn = attn.view(nW // g, g, self.heads, n, n) + mask[:, None]
            attn = attn.view(nW, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        if record_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(nW, n, C)
        return self.proj(out)


class SpatialReductionAttention(nn.Module):
    """PVT attention: queries from every token, keys/values from a feature
    map downsampled by ``reduction`` via strided conv + norm."""

    def __init__(self, dim: int, heads: int, reduction: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.reduction = reduction
        self.q = nn.Linear(dim, dim, bias=True)
        self.kv = nn.Linear(dim, dim * 2, bias=True)
        self.proj = nn.Linear(dim, dim)
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=reduction, stride=reduction)
            self.norm = nn.LayerNorm(dim)
        self.last_attn = None

    def forward(self, x: torch.Tensor, h: int, w: int, record_attn: bool = False):
        """x: (B, h*w, C)."""
        B, n, C = x.shape
        q = self.q(x).view(B, n, self.heads, C // self.heads).transpose(1, 2)
        if self.reduction > 1:
            r = min(self.reduction, h, w)
            feat = x.transpose(1, 2).view(B, C, h, w)
            if r != self.reduction:
                # Tiny maps: fall back to a single global key/value token.
                feat = F.adaptive_avg_pool2d(feat, 1)
                feat = self.sr(F.interpolate(feat, size=self.sr.kernel_size))
            else:
                ph, pw = (-h) % r, (-w) % r
                if ph or pw:
                    feat = F.pad(feat, (0, pw, 0, ph))
                feat = self.sr(feat)
            kv_in = self.norm(feat.flatten(2).transpose(1, 2))
        else:
            kv_in = x
        m = kv_in.shape[1]
        kv = self.kv(kv_in).view(B, m, 2, self.heads, C // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * (C // self.heads) ** -0.5) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        if record_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, n, C)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = max(1, int(round(dim * expansion)))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _shift_attn_mask(hp: int, wp: int, h: int, w: int, window: int, shift: int,
                     device, dtype) -> torch.Tensor | None:
    """Additive attention mask over the padded (hp, wp) grid.

    Combines the standard cyclic-shift group mask with pad masking: padded
    cells get a unique group so real tokens never attend to them.
    """
    if shift == 0 and hp == h and wp == w:
        return None
    img = torch.zeros(1, hp, wp, 1, device=device)
    cnt = 0
    h_slices = ((0, hp - window), (hp - window, hp - shift), (hp - shift, hp)) \
        if shift else ((0, hp),)
    w_slices = ((0, wp - window), (wp - window, wp - shift), (wp - shift, wp)) \
        if shift else ((0, wp),)
    for hs, he in h_slices:
        for ws, we in w_slices:
            img[:, hs:he, ws:we, :] = cnt
            cnt += 1
    pad = torch.ones(1, hp, wp, 1, device=device, dtype=torch.bool)
    pad[:, :h, :w, :] = False
    if shift:
        img = torch.roll(img, shifts=(-shift, -shift), dims=(1, 2))
        pad = torch.roll(pad, shifts=(-shift, -shift), dims=(1, 2))
    img = img.masked_fill(pad, -1.0)
    groups = window_partition(img, window).view(-1, window * window)
    mask = groups.unsqueeze(1) - groups.unsqueeze(2)
    mask = torch.where(mask == 0, torch.zeros((), device=device, dtype=dtype),
                       torch.full((), float(-100.0), device=device, dtype=dtype))
    # A fully padded row would softmax over all -100; keep self-attention open.
    return mask


class ViTBlock(nn.Module):
    """One attention + FFN block with residuals, preserving (B, H, W, C) shape."""

    def __init__(self, dim: int, heads: int, block_type: str,
                 window: int = 8, shift: int = 0, ffn_expansion: float = 4.0,
                 sra_reduction: int = 1):
        super().__init__()
        if block_type not in ("swin", "swinv2", "pvt"):
            raise ValueError(f"unknown block type {block_type!r}")
        if block_type != "pvt" and shift >= window:
            raise ValueError(f"shift {shift} must be < window {window}")
        self.dim = dim
        self.block_type = block_type
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        if block_type == "pvt":
            self.attn = SpatialReductionAttention(dim, heads, sra_reduction)
        else:
            self.attn = WindowAttention(dim, heads, window, v2=(block_type == "swinv2"))
        self.ffn = FeedForward(dim, ffn_expansion)

    def _window_attn(self, x: torch.Tensor, record_attn: bool) -> torch.Tensor:
        B, H, W, C = x.shape
        window = self.attn.window
        shift = self.shift if min(H, W) > window else 0
        ph, pw = (-H) % window, (-W) % window
        hp, wp = H + ph, W + pw
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
        mask = _shift_attn_mask(hp, wp, H, W, window, shift,
                                x.device, x.dtype)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        wins = window_partition(x, window).view(-1, window * window, C)
        wins = self.attn(wins, mask=mask, record_attn=record_attn)
        x = window_merge(wins.view(-1, window, window, C), hp, wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if ph or pw:
            x = x[:, :H, :W, :]
        return x

    def forward(self, x: torch.Tensor, record_attn: bool = False) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[-1]}")
        B, H, W, C = x.shape
        post_norm = self.block_type == "swinv2"
        if self.block_type == "pvt":
            tokens = x.view(B, H * W, C)
            a = self.attn(self.norm1(tokens), H, W, record_attn=record_attn)
            tokens = tokens + a
            tokens = tokens + self.ffn(self.norm2(tokens))
            return tokens.view(B, H, W, C)
        if post_norm:
            x = x + self.norm1(self._window_attn(x, record_attn))
            x = x + self.norm2(self.ffn(x))
        else:
            x = x + self._window_attn(self.norm1(x), record_attn)
            x = x + self.ffn(self.norm2(x))
        return x


def build_stage(dim: int, depth: int, heads: int, block_type: str,
                window: int, ffn_expansion: float,
                sra_reduction: int = 1) -> nn.ModuleList:
    """Stack of blocks; window blocks alternate unshifted/shifted."""
    blocks = nn.ModuleList()
    for i in range(depth):
        shift = 0 if (block_type == "pvt" or i % 2 == 0) else window // 2
        blocks.append(ViTBlock(dim, heads, block_type, window=window,
                               shift=shift, ffn_expansion=ffn_expansion,
                               sra_reduction=sra_reduction))
    return blocks
