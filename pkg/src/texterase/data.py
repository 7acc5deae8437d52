"""Synthetic paired-sample generation and paired-directory dataset loading.

Images are float32 numpy arrays (H, W, 3) in [0, 1]; masks are (H, W)
float32 {0, 1}. Synthetic samples guarantee I_in == I_gt outside the mask.
"""

from __future__ import annotations

import dataclasses
import os

import cv2
import numpy as np
from PIL import Image


@dataclasses.dataclass
class TrainSample:
    image: np.ndarray  # I_in, with text
    truth: np.ndarray  # I_gt, text erased
    mask: np.ndarray   # M_gt, {0,1} text boxes


@dataclasses.dataclass
class PretrainSample:
    image: np.ndarray
    seg: np.ndarray  # S_gt, {0,1} union of filled text boxes
    boxes: list


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth gradient plus a few soft blobs and mild noise."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float32) / size
    c0 = rng.uniform(0.35, 0.65, size=3).astype(np.float32)
    gx = rng.uniform(-0.1, 0.1, size=3).astype(np.float32)
    gy = rng.uniform(-0.1, 0.1, size=3).astype(np.float32)
    img = c0[None, None] + x[..., None] * gx[None, None] + y[..., None] * gy[None, None]
    for _ in range(rng.integers(0, 3)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(size * 0.2, size * 0.4)
        blob = np.exp(-(((x * size - cx) ** 2 + (y * size - cy) ** 2) / (2 * r * r)))
        tint = rng.uniform(-0.04, 0.04, size=3).astype(np.float32)
        img = img + blob[..., None] * tint[None, None]
    img = img + rng.normal(0, 0.003, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _draw_glyph_run(rng: np.random.Generator, img: np.ndarray, box) -> None:
    """Stroke-based stand-in for rendered text inside an axis-aligned box."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    n_glyphs = max(2, w // max(4, h // 2))
    color = rng.uniform(0, 1, size=3)
    if rng.random() < 0.9:  # mostly high-contrast dark/light "ink"
        color = np.full(3, float(rng.choice([0.02, 0.98])))
    color = tuple(float(c) for c in color)
    gw = max(3, w // n_glyphs)
    thickness = max(1, h // 6)
    for g in range(n_glyphs):
        gx0 = x0 + g * gw
        gx1 = min(gx0 + gw - 1, x1 - 1)
        if gx1 - gx0 < 2:
            continue
        for _ in range(rng.integers(3, 6)):
            pa = (int(rng.integers(gx0, gx1 + 1)), int(rng.integers(y0, y1)))
            pb = (int(rng.integers(gx0, gx1 + 1)), int(rng.integers(y0, y1)))
            cv2.line(img, pa, pb, color, thickness, lineType=cv2.LINE_8)


def synth_sample(seed: int, size: int) -> TrainSample:
    """Deterministic procedural sample: background truth, glyph runs
    composited into the input, box mask over the runs."""
    if size % 32:
        raise ValueError(f"size must be divisible by 32, got {size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    truth = _background(rng, size)
    image = truth.copy()
    mask = np.zeros((size, size), dtype=np.float32)
    boxes = []
    for _ in range(int(rng.integers(3, 7))):
        h = int(rng.integers(size // 10, size // 4))
        w = int(rng.integers(size // 5, int(size * 0.7)))
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        box = (x0, y0, x0 + w, y0 + h)
        _draw_glyph_run(rng, image, box)
        mask[y0:y0 + h, x0:x0 + w] = 1.0
        boxes.append(box)
    # Compositing support: outside the boxes the input equals the truth.
    image = np.where(mask[..., None] > 0, image, truth)
    return TrainSample(image=image.astype(np.float32),
                       truth=truth.astype(np.float32), mask=mask)


def sample_boxes(seed: int, size: int) -> list:
    """Bounding boxes of the glyph runs of synth_sample(seed, size)."""
    s = synth_sample(seed, size)
    return _mask_to_boxes(s.mask)


def _mask_to_boxes(mask: np.ndarray) -> list:
    n, labels = cv2.connectedComponents(mask.astype(np.uint8))
    boxes = []
    for i in range(1, n):
        ys, xs = np.nonzero(labels == i)
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max()) + 1,
                      int(ys.max()) + 1))
    return boxes


def rasterize_boxes(boxes, h: int, w: int) -> np.ndarray:
    """Fill polygon/box annotations into a binary (H, W) mask."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for box in boxes:
        pts = np.asarray(box, dtype=np.int32).reshape(-1, 2)
        if len(pts) == 2:  # (x0, y0), (x1, y1) rectangle
            cv2.rectangle(mask, tuple(pts[0]), tuple(pts[1] - 1), 1, -1)
        else:
            cv2.fillPoly(mask, [pts], 1)
    return mask.astype(np.float32)


def parse_annotation(path) -> list:
    """One box per line: comma-separated x,y pairs."""
    boxes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = [int(float(v)) for v in line.split(",")]
            if len(vals) % 2 or len(vals) < 4:
                raise ValueError(f"{path}: bad box line {line!r}")
            boxes.append(list(zip(vals[::2], vals[1::2])))
    return boxes


def write_annotation(path, boxes) -> None:
    with open(path, "w") as f:
        for box in boxes:
            if len(box) == 4 and np.isscalar(box[0]):  # (x0,y0,x1,y1)
                x0, y0, x1, y1 = box
                box = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            f.write(",".join(f"{int(x)},{int(y)}" for x, y in box) + "\n")


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.float32)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) >= 0.5).astype(np.uint8) * 255).save(path)


class PairedDataset:
    """Lazy loader for an image/label/mask directory triple with matching
    filenames (image = I_in, label = I_gt, mask = M_gt)."""

    def __init__(self, root):
        self.root = str(root)
        img_dir = os.path.join(self.root, "image")
        for sub in ("image", "label", "mask"):
            if not os.path.isdir(os.path.join(self.root, sub)):
                raise FileNotFoundError(
                    f"missing subdirectory {sub!r} under {self.root}")
        self.names = sorted(os.listdir(img_dir))
        for name in self.names:
            for sub in ("label", "mask"):
                if not os.path.exists(os.path.join(self.root, sub, name)):
                    raise FileNotFoundError(
                        f"no {sub} counterpart for {name!r} in {self.root}")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i) -> TrainSample:
        name = self.names[i]
        return TrainSample(
            image=read_image(os.path.join(self.root, "image", name)),
            truth=read_image(os.path.join(self.root, "label", name)),
            mask=read_mask(os.path.join(self.root, "mask", name)))

    def shuffled_indices(self, seed: int) -> np.ndarray:
        return np.random.Generator(np.random.PCG64(seed)).permutation(len(self))


class PretrainDataset:
    """image/ + annotation/ (one .txt of boxes per image)."""

    def __init__(self, root):
        self.root = str(root)
        img_dir = os.path.join(self.root, "image")
        ann_dir = os.path.join(self.root, "annotation")
        if not os.path.isdir(img_dir) or not os.path.isdir(ann_dir):
            raise FileNotFoundError(
                f"expected image/ and annotation/ under {self.root}")
        self.names = sorted(os.listdir(img_dir))
        for name in self.names:
            ann = os.path.splitext(name)[0] + ".txt"
            if not os.path.exists(os.path.join(ann_dir, ann)):
                raise FileNotFoundError(f"no annotation for {name!r}")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i) -> PretrainSample:
        name = self.names[i]
        img = read_image(os.path.join(self.root, "image", name))
        ann = os.path.splitext(name)[0] + ".txt"
        boxes = parse_annotation(os.path.join(self.root, "annotation", ann))
        seg = rasterize_boxes(boxes, img.shape[0], img.shape[1])
        return PretrainSample(image=img, seg=seg, boxes=boxes)

    def shuffled_indices(self, seed: int) -> np.ndarray:
        return np.random.Generator(np.random.PCG64(seed)).permutation(len(self))


def augment(sample: TrainSample, seed: int, size: int) -> TrainSample:
    """Identical random horizontal flip plus resize-to-size on all tensors;
    bilinear for images, nearest for the mask."""
    rng = np.random.Generator(np.random.PCG64(seed))
    flip = rng.random() < 0.5
    img, truth, mask = sample.image, sample.truth, sample.mask
    if flip:
        img, truth, mask = img[:, ::-1], truth[:, ::-1], mask[:, ::-1]
    if img.shape[0] != size or img.shape[1] != size:
        img = cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)
        truth = cv2.resize(truth, (size, size), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (size, size), interpolation=cv2.INTER_NEAREST)
    return TrainSample(image=np.ascontiguousarray(img),
                       truth=np.ascontiguousarray(truth),
                       mask=np.ascontiguousarray(mask))
