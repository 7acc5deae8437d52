"""Training objectives: text-aware multi-scale reconstruction, perceptual,
style, dice, hinge adversarial, and their weighted total.

All L1 terms reduce by the mean over all tensor elements, keeping the loss
weights scale-free across resolutions. Tensors are (B, C, H, W).
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F

DICE_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha_msr: float = 1.0
    alpha_per: float = 0.01
    alpha_sty: float = 120.0
    alpha_seg: float = 1.0
    alpha_adv: float = 0.1
    # Scale order (quarter, half, full).
    lambdas: tuple = (5.0, 6.0, 10.0)
    betas: tuple = (0.8, 1.0, 2.0)


def _resize_to(img: torch.Tensor, hw, mask: bool = False) -> torch.Tensor:
    if img.shape[-2:] == tuple(hw):
        return img
    out = F.interpolate(img, size=hw, mode="area")
    if mask:
        out = (out >= 0.5).to(img.dtype)
    return out


def msr_loss(outputs: dict, gt: torch.Tensor, mask: torch.Tensor,
             w: LossWeights) -> torch.Tensor:
    """Masked L1 at (quarter, half, full) scales with per-scale text and
    non-text weights. ``outputs`` keys: image, image_half, image_quarter
    (missing scales are skipped together with their weights)."""
    keys = ("image_quarter", "image_half", "image")
    total = gt.new_zeros(())
    for key, lam, beta in zip(keys, w.lambdas, w.betas):
        if key not in outputs:
            continue
        out = outputs[key]
        if out.shape[0] != gt.shape[0]:
            raise ValueError("batch size mismatch in msr_loss")
        g = _resize_to(gt, out.shape[-2:])
        m = _resize_to(mask, out.shape[-2:], mask=True)
        diff = (out - g).abs()
        total = total + lam * (diff * m).mean() + beta * (diff * (1 - m)).mean()
    return total


def composite_image(out: torch.Tensor, inp: torch.Tensor,
                    mask: torch.Tensor) -> torch.Tensor:
    """Prediction inside text boxes, original pixels outside."""
    if out.shape[-2:] != inp.shape[-2:] or out.shape[-2:] != mask.shape[-2:]:
        raise ValueError("composite_image shape mismatch")
    return out * mask + inp * (1 - mask)


def perceptual_loss(out: torch.Tensor, out_comp: torch.Tensor,
                    gt: torch.Tensor, phi) -> torch.Tensor:
    t_out, t_comp, t_gt = phi(out), phi(out_comp), phi(gt)
    loss = out.new_zeros(())
    for a, b, g in zip(t_out, t_comp, t_gt):
        loss = loss + (a - g).abs().mean() + (b - g).abs().mean()
    return loss


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, C) channel inner products / (H*W*C)."""
    B, C, H, W = feat.shape
    f = feat.reshape(B, C, H * W)
    return (f @ f.transpose(1, 2)) / (H * W * C)


def style_loss(out: torch.Tensor, out_comp: torch.Tensor,
               gt: torch.Tensor, phi) -> torch.Tensor:
    t_out, t_comp, t_gt = phi(out), phi(out_comp), phi(gt)
    loss = out.new_zeros(())
    for a, b, g in zip(t_out, t_comp, t_gt):
        gg = gram_matrix(g)
        loss = loss + (gram_matrix(a) - gg).abs().mean() \
                    + (gram_matrix(b) - gg).abs().mean()
    return loss


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - 2*sum(pred*gt) / (sum(pred^2) + sum(gt^2) + eps); empty-vs-empty -> 0."""
    if pred.shape != gt.shape:
        raise ValueError("dice_loss shape mismatch")
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("dice_loss prediction outside [0, 1]")
    num = 2 * (pred * gt).sum()
    den = (pred * pred).sum() + (gt * gt).sum() + DICE_EPS
    if den <= 2 * DICE_EPS and num == 0:
        return pred.new_zeros(())
    return 1 - num / den


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Hinge losses. Returns (discriminator loss, generator loss)."""
    zero = d_real.new_zeros(())
    l_d = torch.maximum(zero, 1 - d_real) + torch.maximum(zero, 1 + d_fake)
    l_g = -d_fake
    return l_d, l_g


def total_loss(parts: dict, w: LossWeights) -> torch.Tensor:
    """Weighted sum over parts {msr, per, sty, seg, adv}."""
    weights = {"msr": w.alpha_msr, "per": w.alpha_per, "sty": w.alpha_sty,
               "seg": w.alpha_seg, "adv": w.alpha_adv}
    total = None
    for name, alpha in weights.items():
        part = parts[name]
        val = part if torch.is_tensor(part) else torch.as_tensor(float(part))
        if not torch.isfinite(val).all():
            raise FloatingPointError(f"non-finite loss component: {name}")
        term = alpha * val
        total = term if total is None else total + term
    return total
