"""Bundled synthetic imagery: a textured test scene and a 10-class dataset.

Nothing here ships as binary data; every image is generated on demand
from an explicit seed, so tests and demos are reproducible everywhere.

The desk dataset is 10 procedurally drawn 32x32 shape/texture classes
with randomized colors, geometry, contrast, and a little pixel noise.
The contrast jitter deliberately produces a tail of faint, hard examples:
those sit near the decision boundary of the reference classifier and are
the images whose predictions flip between virtual devices.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, LabeledImage, ManifestEntry, encode_image, save_manifest
from .envsim import (
    BayerImage,
    DistortionRanges,
    apply_distortion,
    apply_gaussian_noise,
    jpeg_roundtrip,
    mosaic,
    sample_distort,
)
from .seeding import derive_rng

DESK_CLASSES = (
    "h_stripes",
    "v_stripes",
    "d_stripes",
    "disk",
    "ring",
    "bar",
    "checker",
    "target",
    "blobs",
    "cross",
)


def make_test_image(height: int = 96, width: int = 96, seed: int = 7) -> np.ndarray:
    """A deterministic photo-like scene: gradients, disks, texture, grain."""
    rng = derive_rng(seed, "test_image")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height - 1
    xx /= width - 1
    img = np.stack(
        [
            0.25 + 0.5 * xx,
            0.30 + 0.4 * yy,
            0.55 - 0.3 * xx * yy,
        ],
        axis=-1,
    )
    # a few colored disks
    for _ in range(5):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        radius = rng.uniform(0.08, 0.2)
        color = rng.uniform(0.1, 0.9, size=3)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blend = np.clip((radius - dist) / 0.02, 0.0, 1.0)[..., None]
        img = img * (1 - blend) + color * blend
    # fine sinusoidal texture plus grain, so lossy codecs have work to do
    texture = 0.04 * np.sin(2 * np.pi * (7 * xx + 11 * yy))
    img += texture[..., None]
    img += rng.normal(0.0, 0.005, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_test_raw(seed: int = 7) -> BayerImage:
    """Synthetic RGGB raw of the bundled test scene."""
    return mosaic(make_test_image(seed=seed))


# ---------------------------------------------------------------------------
# desk dataset


def _blend(base: np.ndarray, mask: np.ndarray, color: np.ndarray) -> np.ndarray:
    return base * (1.0 - mask[..., None]) + color * mask[..., None]


def _class_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Soft [0, 1] foreground mask for one class instance."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy / (size - 1) - 0.5
    xx = xx / (size - 1) - 0.5
    name = DESK_CLASSES[cls]
    if name in ("h_stripes", "v_stripes", "d_stripes"):
        # fine periods (~4-7 px at 32x32): crisp under noise, fragile to codecs
        period = rng.uniform(0.13, 0.2)
        phase = rng.uniform(0.0, 1.0)
        if name == "h_stripes":
            angle = np.deg2rad(rng.uniform(-8.0, 8.0))
        elif name == "v_stripes":
            angle = np.deg2rad(90.0 + rng.uniform(-8.0, 8.0))
        else:
            angle = np.deg2rad(45.0 + rng.uniform(-8.0, 8.0))
        coord = yy * np.cos(angle) + xx * np.sin(angle)
        return 0.5 + 0.5 * np.sin(2 * np.pi * (coord / period + phase))
    if name == "disk":
        cy, cx = rng.uniform(-0.12, 0.12, size=2)
        radius = rng.uniform(0.18, 0.3)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip((radius - dist) / 0.03, 0.0, 1.0)
    if name == "ring":
        cy, cx = rng.uniform(-0.1, 0.1, size=2)
        radius = rng.uniform(0.24, 0.36)
        thickness = rng.uniform(0.05, 0.08)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip((thickness / 2 - np.abs(dist - radius)) / 0.02, 0.0, 1.0)
    if name == "bar":
        # one thick elongated bar: aspect ratio is the robust cue
        cy, cx = rng.uniform(-0.08, 0.08, size=2)
        angle = rng.uniform(0.0, np.pi)
        along = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
        across = -(yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
        half_len = rng.uniform(0.3, 0.42)
        half_wid = rng.uniform(0.07, 0.11)
        inside = np.maximum(np.abs(along) / half_len, np.abs(across) / half_wid)
        return np.clip((1.0 - inside) / 0.1, 0.0, 1.0)
    if name == "checker":
        cell = rng.uniform(0.08, 0.12)  # ~2.5-4 px cells
        phase_y, phase_x = rng.uniform(0.0, 1.0, size=2)
        return (
            (np.floor(yy / cell + phase_y) + np.floor(xx / cell + phase_x)) % 2.0
        )
    if name == "target":
        # concentric rings: radially redundant (noise-robust) but the fine
        # radial period sits right where block codecs bite
        cy, cx = rng.uniform(-0.08, 0.08, size=2)
        period = rng.uniform(0.09, 0.14)
        phase = rng.uniform(0.0, 1.0)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return 0.5 + 0.5 * np.sin(2 * np.pi * (dist / period + phase))
    if name == "blobs":
        mask = np.zeros_like(yy)
        for _ in range(int(rng.integers(3, 6))):
            cy, cx = rng.uniform(-0.34, 0.34, size=2)
            sigma = rng.uniform(0.07, 0.1)
            mask += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        return np.clip(mask, 0.0, 1.0)
    if name == "cross":
        half = rng.uniform(0.035, 0.06)
        cy, cx = rng.uniform(-0.08, 0.08, size=2)
        bar_v = np.clip((half - np.abs(xx - cx)) / 0.02, 0.0, 1.0)
        bar_h = np.clip((half - np.abs(yy - cy)) / 0.02, 0.0, 1.0)
        return np.maximum(bar_v, bar_h)
    raise ValueError(f"unknown class {cls}")


def _desk_image(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    bg = rng.uniform(0.2, 0.8, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    contrast = rng.uniform(0.65, 1.0)
    fg = np.clip(bg + direction * contrast, 0.0, 1.0)
    mask = _class_mask(cls, size, rng)
    img = _blend(np.broadcast_to(bg, (size, size, 3)).copy(), mask, fg)
    img += rng.normal(0.0, 0.005, size=img.shape)
    img += rng.uniform(-0.03, 0.03)
    return np.clip(img, 0.0, 1.0)


def make_desk_dataset(
    train_per_class: int = 400,
    eval_per_class: int = 100,
    seed: int = 0,
    size: int = 32,
) -> tuple[list[LabeledImage], list[LabeledImage], list[str]]:
    """Generate the bundled 10-class dataset (train list, eval list, names)."""
    train, evald = [], []
    for cls in range(len(DESK_CLASSES)):
        for split, count, items in (("train", train_per_class, train), ("eval", eval_per_class, evald)):
            for i in range(count):
                rng = derive_rng(seed, "desk", split, cls, i)
                image_id = f"{split}/{DESK_CLASSES[cls]}_{i:04d}"
                items.append(LabeledImage(image_id, _desk_image(cls, rng, size), (cls,)))
    return train, evald, list(DESK_CLASSES)


def pretraining_set(
    train: list[LabeledImage], seed: int, copies: int = 3
) -> list[LabeledImage]:
    """Train set plus ``copies`` perturbed duplicates of every image.

    Two of the copies carry heavy Gaussian noise (sigma 0.12..0.3) and the
    rest a random photometric distortion or JPEG round trip, so a model
    pretrained on this set starts out tolerant of generic device noise
    before any stability fine-tuning happens.  Fully seeded.
    """
    ranges = DistortionRanges()
    out = list(train)
    for img in train:
        rng = derive_rng(seed, "pretrain_aug", img.image_id)
        for j in range(copies):
            if j <= 1:
                sigma = rng.uniform(0.12, 0.3)
                noisy = apply_gaussian_noise(img.tensor, sigma * sigma, rng)
            elif rng.integers(2) == 0:
                noisy = apply_distortion(img.tensor, sample_distort(ranges, rng))
            else:
                noisy = jpeg_roundtrip(img.tensor, int(rng.integers(40, 101)))
            out.append(LabeledImage(f"{img.image_id}#aug{j}", noisy, img.accepted_labels))
    return out


def write_desk_dataset(
    out_dir: str | Path,
    train_per_class: int = 400,
    eval_per_class: int = 100,
    seed: int = 0,
    size: int = 32,
) -> tuple[Path, Path]:
    """Materialize the desk dataset as PNGs plus train/eval manifests."""
    out = Path(out_dir)
    train, evald, classes = make_desk_dataset(train_per_class, eval_per_class, seed, size)
    manifests = []
    for split, items in (("train", train), ("eval", evald)):
        entries = []
        for img in items:
            rel = f"{img.image_id}.png"
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(encode_image(img.tensor, "png"))
            entries.append(ManifestEntry(path=rel, labels=(classes[img.primary_label],)))
        manifest = DatasetManifest(
            class_vocabulary=tuple(classes), entries=tuple(entries), split=split
        )
        manifest_path = out / f"{split}.jsonl"
        save_manifest(manifest, manifest_path)
        manifests.append(manifest_path)
    return manifests[0], manifests[1]
