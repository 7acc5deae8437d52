"""Optimization loops, learning-rate schedules, checkpointing, loss logging.

Three phases share one TrainState: adversarial erasing training, masked-patch
pretraining, and encoder-only segmentation finetune. All randomness is drawn
from seeds derived with ``derive_seed``, so a resumed run replays the exact
sample order and masks of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os

import numpy as np
import torch

from . import config as config_mod
from . import losses as losses_mod
from . import segmim
from .config import ModelConfig
from .discriminator import Discriminator
from .features import FeatureExtractor
from .model import Eraser
from .serialization import dump_arrays, load_arrays

CHECKPOINT_VERSION = 1
WEIGHT_DECAY = 0.05
ADAM_BETAS = (0.9, 0.999)

# Subnormal floats stall x86 arithmetic by orders of magnitude; adversarial
# training drives some tensors into that range, so flush them to zero.
torch.set_flush_denormal(True)

MIM_RATIO = 0.6
MIM_PATCH = 32


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Schedule:
    mode: str  # str_linear | pretrain_step | finetune_cosine
    base_lr: float
    final_lr: float
    epochs: int
    drop_epoch: int = 0


def default_schedule(mode: str, epochs: int) -> Schedule:
    if mode == "str_linear":
        return Schedule(mode, 1e-4, 1e-5, epochs)
    if mode == "pretrain_step":
        # Drop scales with the run length (80/100 in the reference setup).
        return Schedule(mode, 1e-4, 1e-5, epochs,
                        drop_epoch=max(1, int(round(epochs * 0.8))))
    if mode == "finetune_cosine":
        return Schedule(mode, 0.00125, 0.0, epochs)
    raise ValueError(f"unknown schedule mode {mode!r}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    if schedule.mode == "str_linear":
        if schedule.epochs == 1:
            return schedule.base_lr
        t = epoch / (schedule.epochs - 1)
        return schedule.base_lr + t * (schedule.final_lr - schedule.base_lr)
    if schedule.mode == "pretrain_step":
        return schedule.base_lr if epoch < schedule.drop_epoch else schedule.final_lr
    if schedule.mode == "finetune_cosine":
        return schedule.base_lr * (1 + math.cos(math.pi * epoch / schedule.epochs)) / 2
    raise ValueError(f"unknown schedule mode {schedule.mode!r}")


def derive_seed(root_seed: int, *parts) -> int:
    h = hashlib.sha256(("/".join([str(root_seed)] + [str(p) for p in parts])
                        ).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


class TrainState:
    def __init__(self, cfg: ModelConfig, schedule: Schedule, seed: int = 0,
                 weights: losses_mod.LossWeights | None = None,
                 device: str = "cpu", extractor: FeatureExtractor | None = None):
        torch.manual_seed(derive_seed(seed, "init"))
        self.cfg = cfg
        self.device = torch.device(device)
        self.seed = seed
        self.schedule = schedule
        self.weights = weights or losses_mod.LossWeights()
        self.model = Eraser(cfg).to(self.device)
        self.disc = Discriminator().to(self.device)
        self.extractor = (extractor or FeatureExtractor()).to(self.device)
        self.g_opt = torch.optim.AdamW(self.model.parameters(),
                                       lr=schedule.base_lr, betas=ADAM_BETAS,
                                       weight_decay=WEIGHT_DECAY)
        self.d_opt = torch.optim.AdamW(self.disc.parameters(),
                                       lr=schedule.base_lr, betas=ADAM_BETAS,
                                       weight_decay=WEIGHT_DECAY)
        self.epoch = 0
        self.step = 0

    def set_epoch_lr(self, epoch: int) -> float:
        lr = lr_at(self.schedule, epoch)
        for opt in (self.g_opt, self.d_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr


def _to_batch(samples, device) -> dict:
    """numpy TrainSamples -> torch tensors (B, C, H, W)."""
    img = torch.from_numpy(np.stack([s.image for s in samples]))
    gt = torch.from_numpy(np.stack([s.truth for s in samples]))
    mask = torch.from_numpy(np.stack([s.mask for s in samples]))
    return {
        "image": img.permute(0, 3, 1, 2).contiguous().to(device),
        "truth": gt.permute(0, 3, 1, 2).contiguous().to(device),
        "mask": mask.unsqueeze(1).to(device),
    }


def _pretrain_batch(samples, device) -> dict:
    img = torch.from_numpy(np.stack([s.image for s in samples]))
    seg = torch.from_numpy(np.stack([s.seg for s in samples]))
    return {
        "image": img.permute(0, 3, 1, 2).contiguous().to(device),
        "seg": seg.unsqueeze(1).to(device),
    }


def train_step(state: TrainState, batch: dict) -> dict:
    """Discriminator update then generator update on one batch.

    Returns the scalar loss components; aborts on non-finite values.
    """
    state.model.train()
    img, gt, mask = batch["image"], batch["truth"], batch["mask"]
    out = state.model(img, training=True)

    # Discriminator step (generator output detached).
    state.disc.train()
    d_real = state.disc(img, mask).mean()
    d_fake = state.disc(out["image"].detach(), mask).mean()
    l_d, _ = losses_mod.adversarial_losses(d_real, d_fake)
    _check_finite("adv_d", l_d)
    state.d_opt.zero_grad(set_to_none=True)
    l_d.backward()
    state.d_opt.step()

    # Generator step; discriminator frozen (eval keeps its spectral-norm
    # power-iteration state fixed) and its gradients discarded.
    state.disc.eval()
    comp = losses_mod.composite_image(out["image"], img, mask)
    parts = {
        "msr": losses_mod.msr_loss(out, gt, mask, state.weights),
        "per": losses_mod.perceptual_loss(out["image"], comp, gt, state.extractor),
        "sty": losses_mod.style_loss(out["image"], comp, gt, state.extractor),
        "seg": losses_mod.dice_loss(out["mask"], mask),
        "adv": -state.disc(out["image"], mask).mean(),
    }
    for name, val in parts.items():
        _check_finite(name, val)
    total = losses_mod.total_loss(parts, state.weights)
    state.g_opt.zero_grad(set_to_none=True)
    state.d_opt.zero_grad(set_to_none=True)
    total.backward()
    state.g_opt.step()
    state.d_opt.zero_grad(set_to_none=True)
    state.disc.train()
    state.step += 1
    result = {k: float(v.detach()) for k, v in parts.items()}
    result.update(total=float(total.detach()), adv_d=float(l_d.detach()),
                  d_real=float(d_real.detach()), d_fake=float(d_fake.detach()))
    return result


def pretrain_step(state: TrainState, batch: dict, masks) -> dict:
    """One optimizer step on the summed segmentation + reconstruction loss."""
    state.model.train()
    img, seg_gt = batch["image"], batch["seg"]
    m = segmim.stack_masks(masks) if isinstance(masks, (list, tuple)) else masks
    out = state.model.forward_pretrain(img, m)
    total, l_dice, l_mim = segmim.pretrain_loss(
        out["seg"], seg_gt, img, out["recon"], m)
    _check_finite("dice", l_dice)
    _check_finite("mim", l_mim)
    state.g_opt.zero_grad(set_to_none=True)
    total.backward()
    state.g_opt.step()
    state.step += 1
    return {"total": float(total.detach()), "dice": float(l_dice.detach()),
            "mim": float(l_mim.detach())}


def finetune_step(state: TrainState, batch: dict) -> dict:
    """Encoder-only segmentation step; decoder parameters receive no update."""
    state.model.train()
    seg = state.model.forward_seg_only(batch["image"])
    l_dice = losses_mod.dice_loss(seg, batch["seg"])
    _check_finite("dice", l_dice)
    state.g_opt.zero_grad(set_to_none=True)
    l_dice.backward()
    # forward_seg_only never touches the decoder, so its grads stay None;
    # zero them defensively in case of shared references.
    for p in state.model.decoder.parameters():
        p.grad = None
    state.g_opt.step()
    state.step += 1
    return {"total": float(l_dice.detach()), "dice": float(l_dice.detach())}


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite loss component: {name}")


def iterate_batches(n_samples: int, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled batch index lists; the last partial batch is
    padded by wrapping."""
    order = np.random.Generator(np.random.PCG64(
        derive_seed(seed, "order", epoch))).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        idx = list(order[start:start + batch_size])
        while len(idx) < batch_size and n_samples:
            idx.append(int(order[(start + len(idx)) % n_samples]))
        yield [int(i) for i in idx]


class LossLog:
    """Append-only JSONL loss log."""

    def __init__(self, path):
        self.path = str(path)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _flatten_state_dict(prefix: str, sd: dict, arrays: dict, meta: dict) -> None:
    scalars = {}
    for key, val in sd.items():
        if torch.is_tensor(val):
            arrays[f"{prefix}.{key}"] = val.detach().cpu().numpy()
        else:
            scalars[key] = val
    meta[prefix] = scalars


def _flatten_optimizer(prefix: str, opt, arrays: dict, meta: dict) -> None:
    sd = opt.state_dict()
    groups = []
    for g in sd["param_groups"]:
        groups.append({k: v for k, v in g.items()})
    meta[prefix] = {"param_groups": groups, "state_keys": {}}
    for idx in sorted(sd["state"]):  # canonical order for byte stability
        entry = sd["state"][idx]
        keys = []
        for k, v in entry.items():
            if torch.is_tensor(v):
                arrays[f"{prefix}.{idx}.{k}"] = v.detach().cpu().numpy()
            keys.append(k)
        meta[prefix]["state_keys"][str(idx)] = keys


def _restore_optimizer(prefix: str, opt, arrays: dict, meta: dict) -> None:
    info = meta[prefix]
    state = {}
    for idx_s, keys in info["state_keys"].items():
        entry = {}
        for k in keys:
            arr = arrays[f"{prefix}.{idx_s}.{k}"]
            entry[k] = torch.from_numpy(arr.copy())
        state[int(idx_s)] = entry
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})


def save_checkpoint(state: TrainState, path) -> None:
    arrays, meta = {}, {}
    _flatten_state_dict("model", state.model.state_dict(), arrays, meta)
    _flatten_state_dict("disc", state.disc.state_dict(), arrays, meta)
    _flatten_optimizer("g_opt", state.g_opt, arrays, meta)
    _flatten_optimizer("d_opt", state.d_opt, arrays, meta)
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    meta["checkpoint_version"] = CHECKPOINT_VERSION
    meta["config"] = config_mod.dumps(state.cfg)
    meta["schedule"] = dataclasses.asdict(state.schedule)
    meta["weights"] = dataclasses.asdict(state.weights)
    meta["extractor"] = {"seed": state.extractor.seed,
                         "base_channels": state.extractor.base_channels}
    meta["seed"] = state.seed
    meta["epoch"] = state.epoch
    meta["step"] = state.step
    data = dump_arrays(arrays, meta)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, device: str = "cpu") -> TrainState:
    with open(path, "rb") as f:
        try:
            arrays, meta = load_arrays(f.read())
        except ValueError as e:
            raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    cfg = config_mod.loads(meta["config"])
    schedule = Schedule(**meta["schedule"])
    weights = losses_mod.LossWeights(
        **{k: tuple(v) if isinstance(v, list) else v
           for k, v in meta["weights"].items()})
    extractor = FeatureExtractor(
        base_channels=meta["extractor"]["base_channels"],
        seed=meta["extractor"]["seed"])
    state = TrainState(cfg, schedule, seed=meta["seed"], weights=weights,
                       device=device, extractor=extractor)
    state.epoch = meta["epoch"]
    state.step = meta["step"]

    model_sd = {k[len("model."):]: torch.from_numpy(v.copy())
                for k, v in arrays.items() if k.startswith("model.")}
    state.model.load_state_dict(model_sd)
    disc_sd = {k[len("disc."):]: torch.from_numpy(v.copy())
               for k, v in arrays.items() if k.startswith("disc.")}
    state.disc.load_state_dict(disc_sd)
    _restore_optimizer("g_opt", state.g_opt, arrays, meta)
    _restore_optimizer("d_opt", state.d_opt, arrays, meta)
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch"].copy()))
    return state


def run_training(state: TrainState, dataset, epochs: int, batch_size: int,
                 log: LossLog | None = None, mode: str = "train",
                 checkpoint_path=None, checkpoint_every: int = 0):
    """Epoch loop for any of the three phases. Resumes from state.epoch."""
    from .data import augment
    history = []
    for epoch in range(state.epoch, epochs):
        lr = state.set_epoch_lr(epoch)
        for batch_idx, idxs in enumerate(
                iterate_batches(len(dataset), batch_size, state.seed, epoch)):
            samples = [dataset[i] for i in idxs]
            if mode == "train":
                samples = [augment(s, derive_seed(state.seed, "aug", epoch, j),
                                   state.cfg.input_size)
                           for j, s in zip(idxs, samples)]
                batch = _to_batch(samples, state.device)
                rec = train_step(state, batch)
            else:
                batch = _pretrain_batch(samples, state.device)
                if mode == "pretrain":
                    masks = [segmim.generate_mim_mask(
                        state.cfg.input_size, state.cfg.input_size,
                        MIM_RATIO, MIM_PATCH,
                        derive_seed(state.seed, "mim", epoch, j))
                        for j in idxs]
                    rec = pretrain_step(state, batch, masks)
                elif mode == "finetune":
                    rec = finetune_step(state, batch)
                else:
                    raise ValueError(f"unknown mode {mode!r}")
            rec.update(epoch=epoch, batch=batch_idx, step=state.step, lr=lr)
            if log is not None:
                log.append(rec)
            history.append(rec)
        state.epoch = epoch + 1
        if checkpoint_path and checkpoint_every and \
                (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return history
