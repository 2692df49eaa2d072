"""Deterministic synthetic segmentation scenes: colored shapes on a noisy background.

Class 0 is background; shape classes cycle through circle, rectangle, triangle.
Images are whole-valued (8-bit scale) so that attack budgets on the 0-255 axis
can be checked exactly.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import InputError

# Muted palette on purpose: class colors close enough that the trained model
# keeps small margins, so sign-gradient attacks have measurable effect.
DEFAULT_PALETTE = [
    (120, 120, 120),  # background
    (160, 110, 110),  # circle
    (110, 160, 110),  # rectangle
    (110, 110, 160),  # triangle
]


@dataclass
class DatasetConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: tuple = (3, 5)
    palette: list = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    noise_std: float = 25.0
    seed: int = 0
    train_size: int = 200
    val_size: int = 100
    hidden_class: int = 1   # the class the deletion attack targets

    def __post_init__(self):
        if self.num_classes < 3:
            raise InputError("need at least 3 classes (background + a hideable class + complement)")
        if self.height < 32 or self.width < 32:
            raise InputError("images must be at least 32x32")
        if len(self.palette) < self.num_classes:
            raise InputError("palette must cover every class")

    def to_dict(self):
        return {
            "height": self.height, "width": self.width,
            "num_classes": self.num_classes,
            "shapes_per_image": list(self.shapes_per_image),
            "palette": [list(c) for c in self.palette],
            "noise_std": self.noise_std, "seed": self.seed,
            "train_size": self.train_size, "val_size": self.val_size,
            "hidden_class": self.hidden_class,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["shapes_per_image"] = tuple(d.get("shapes_per_image", (3, 5)))
        return cls(**d)


@dataclass
class SegSample:
    image: np.ndarray    # H x W x 3 float32, whole values in [0, 255]
    labels: np.ndarray   # H x W int32 class ids
    id: str = ""


def _paint_circle(rng, img, lab, cls, color, h, w):
    r = int(rng.integers(max(4, h // 12), h // 4))
    cy = int(rng.integers(r, h - r))
    cx = int(rng.integers(r, w - r))
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    img[mask] = color
    lab[mask] = cls


def _paint_rectangle(rng, img, lab, cls, color, h, w):
    rh = int(rng.integers(h // 8, h // 3))
    rw = int(rng.integers(w // 8, w // 3))
    top = int(rng.integers(0, h - rh))
    left = int(rng.integers(0, w - rw))
    img[top:top + rh, left:left + rw] = color
    lab[top:top + rh, left:left + rw] = cls


def _paint_triangle(rng, img, lab, cls, color, h, w):
    size = int(rng.integers(h // 6, h // 3))
    cy = int(rng.integers(size, h - size))
    cx = int(rng.integers(size, w - size))
    pts = np.array([
        (cy - size, cx),
        (cy + size, cx - size),
        (cy + size, cx + size),
    ], np.float64)
    yy, xx = np.mgrid[:h, :w]
    mask = np.ones((h, w), bool)
    for a in range(3):
        p, q = pts[a], pts[(a + 1) % 3]
        # half-plane test: keep pixels on the interior side of edge p->q
        cross = (q[0] - p[0]) * (xx - p[1]) - (q[1] - p[1]) * (yy - p[0])
        mask &= cross >= 0
    img[mask] = color
    lab[mask] = cls


_PAINTERS = [_paint_circle, _paint_rectangle, _paint_triangle]


def shape_kind(cls):
    """Painter index for a shape class id (1-based over the shape classes)."""
    return (cls - 1) % len(_PAINTERS)


def generate_scene(rng, cfg, sample_id=""):
    """Draw shapes back-to-front, then add Gaussian pixel noise and quantize."""
    h, w = cfg.height, cfg.width
    img = np.empty((h, w, 3), np.float64)
    img[:] = cfg.palette[0]
    lab = np.zeros((h, w), np.int32)
    lo, hi = cfg.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    for _ in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes))
        _PAINTERS[shape_kind(cls)](rng, img, lab, cls, cfg.palette[cls], h, w)
    if cfg.noise_std > 0:
        img += rng.normal(0.0, cfg.noise_std, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.float32)
    return SegSample(image=img, labels=lab, id=sample_id)


def generate_samples(cfg, split):
    """In-memory generation of one split with per-sample derived seeds."""
    split_idx = {"train": 0, "val": 1}[split]
    size = cfg.train_size if split == "train" else cfg.val_size
    samples = []
    for i in range(size):
        rng = np.random.default_rng([cfg.seed, split_idx, i])
        samples.append(generate_scene(rng, cfg, sample_id=f"{split}_{i:04d}"))
    return samples


def save_samples(out_dir, samples):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for s in samples:
        tensorio.save_tensor(os.path.join(out_dir, "images", f"{s.id}.ten"),
                             s.image.astype(np.uint8))
        tensorio.save_tensor(os.path.join(out_dir, "labels", f"{s.id}.ten"), s.labels)


def load_samples(data_dir, ids):
    samples = []
    for sid in ids:
        img = tensorio.load_tensor(os.path.join(data_dir, "images", f"{sid}.ten"))
        lab = tensorio.load_tensor(os.path.join(data_dir, "labels", f"{sid}.ten"))
        samples.append(SegSample(image=img.astype(np.float32), labels=lab, id=sid))
    return samples


def generate_dataset(cfg, out_dir):
    """Writes images/<id>.ten, labels/<id>.ten and manifest.json; returns
    (train samples, val samples, manifest dict)."""
    train = generate_samples(cfg, "train")
    val = generate_samples(cfg, "val")
    save_samples(out_dir, train)
    save_samples(out_dir, val)
    manifest = {
        "config": cfg.to_dict(),
        "train_ids": [s.id for s in train],
        "val_ids": [s.id for s in val],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return train, val, manifest


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = DatasetConfig.from_dict(manifest["config"])
    train = load_samples(data_dir, manifest["train_ids"])
    val = load_samples(data_dir, manifest["val_ids"])
    return train, val, cfg
