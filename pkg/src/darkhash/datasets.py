"""Dataset generation, ingestion and the poisoned/benign surrogate split.

Everything here is seeded and deterministic: calling any generator twice
with equal arguments produces identical output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .trigger import TriggerSpec, apply_trigger

SPLITS = ("train", "query", "database")
# per-class split ratios: 70% train / 10% query / 20% database
TRAIN_FRAC, QUERY_FRAC = 0.7, 0.1


class InvalidConfigError(ValueError):
    pass


class IngestError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: np.ndarray   # (L,) uint8 multi-hot
    id: str


@dataclass
class DatasetBundle:
    train: list[LabeledImage]
    query: list[LabeledImage]
    database: list[LabeledImage]
    class_count: int


@dataclass
class SurrogateSplit:
    poisoned: list[LabeledImage]
    benign: list[LabeledImage]
    poisoning_rate: float


def one_hot(cls: int, n_classes: int) -> np.ndarray:
    label = np.zeros(n_classes, dtype=np.uint8)
    label[cls] = 1
    return label


def stack_pixels(images: list[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])


def stack_labels(images: list[LabeledImage]) -> np.ndarray:
    return np.stack([im.label for im in images])


# synthetic images mimic the object-on-background structure of natural
# photos: a fixed smooth class pattern fills the center window and a fresh
# smooth background fills the border of every sample. Keeping borders
# class-free matters: a corner trigger then sits on statistics shared by
# any dataset from this family, which is what makes cross-dataset trigger
# transfer possible at all.
PATTERN_RES = 2  # low-res grid a pattern/background is upsampled from


def _smooth_field(rng: np.random.Generator, size: int, channels: int,
                  res: int = PATTERN_RES) -> np.ndarray:
    low = rng.uniform(size=(res, res, channels))
    return np.clip(ndimage.zoom(low, (size / res, size / res, 1), order=1), 0.0, 1.0)


def _center_mask(size: int) -> np.ndarray:
    margin = max(1, round(size * 3 / 16))
    mask = np.zeros((size, size, 1))
    mask[margin:size - margin, margin:size - margin] = 1.0
    return mask


def _composite_sample(rng: np.random.Generator, pattern: np.ndarray,
                      cmask: np.ndarray, size: int, channels: int,
                      noise_std: float) -> np.ndarray:
    bg = _smooth_field(rng, size, channels)
    px = bg * (1 - cmask) + pattern * cmask
    px = px + rng.normal(0.0, noise_std, size=(size, size, channels))
    return np.clip(px, 0.0, 1.0).astype(np.float32)


def generate_synthetic_mainset(classes: int, per_class: int, image_size: int,
                               noise_std: float = 0.05, seed: int = 0,
                               channels: int = 3) -> DatasetBundle:
    """Synthetic multi-class main-task dataset.

    Each class owns a fixed smooth center pattern; every sample composes
    that pattern onto its own random smooth background plus Gaussian
    pixel noise, clipped to [0, 1]. Per class the first 70% of samples go
    to train, the next 10% to query and the rest to database, so the
    splits are deterministic given the seed.
    """
    if classes < 2:
        raise InvalidConfigError("need at least 2 classes")
    if per_class < 20:
        raise InvalidConfigError("need at least 20 samples per class")
    rng = np.random.default_rng(seed)
    patterns = np.stack([_smooth_field(rng, image_size, channels)
                         for _ in range(classes)])
    cmask = _center_mask(image_size)
    n_train = int(per_class * TRAIN_FRAC)
    n_query = int(per_class * QUERY_FRAC)
    bundle = DatasetBundle(train=[], query=[], database=[], class_count=classes)
    for c in range(classes):
        for i in range(per_class):
            pixels = _composite_sample(rng, patterns[c], cmask, image_size,
                                       channels, noise_std)
            img = LabeledImage(pixels=pixels, label=one_hot(c, classes),
                               id=f"c{c:02d}-{i:04d}")
            if i < n_train:
                bundle.train.append(img)
            elif i < n_train + n_query:
                bundle.query.append(img)
            else:
                bundle.database.append(img)
    return bundle


def generate_heldout_surrogate(count: int, image_size: int, classes: int = 100,
                               noise_std: float = 0.05, seed: int = 0,
                               channels: int = 3) -> list[LabeledImage]:
    """Held-out-class surrogate: same composite structure as the main
    task but fresh class patterns, assigned round-robin.

    Many classes (default 100) matter: the attack generalizes across
    class patterns only when the surrogate covers the pattern space
    densely enough for unseen main-task patterns to sit inside it.
    """
    rng = np.random.default_rng(seed)
    patterns = np.stack([_smooth_field(rng, image_size, channels)
                         for _ in range(classes)])
    cmask = _center_mask(image_size)
    out = []
    for i in range(count):
        c = i % classes
        pixels = _composite_sample(rng, patterns[c], cmask, image_size,
                                   channels, noise_std)
        out.append(LabeledImage(pixels=pixels, label=one_hot(c, classes),
                                id=f"s{c:03d}-{i:05d}"))
    return out


def generate_gaussian_surrogate(count: int, image_size: int, mu: float = 0.5,
                                sigma: float = 1.0, seed: int = 0,
                                classes: int = 10,
                                channels: int = 3) -> list[LabeledImage]:
    """Pure-noise surrogate: every pixel i.i.d. N(mu, sigma^2), clipped to [0, 1].

    sigma=1 is the Gauss-I variant, sigma=0.2 the Gauss-II variant.
    Labels are round-robin pseudo-classes so a shadow target class (and
    hence an anchor) is still well defined.
    """
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")
    rng = np.random.default_rng(seed)
    pixels = np.clip(rng.normal(mu, sigma, size=(count, image_size, image_size, channels)),
                     0.0, 1.0).astype(np.float32)
    return [LabeledImage(pixels=pixels[i], label=one_hot(i % classes, classes),
                         id=f"g-{i:05d}")
            for i in range(count)]


def split_surrogate(surrogate: list[LabeledImage], poisoning_rate: float,
                    trigger: TriggerSpec, seed: int = 0) -> SurrogateSplit:
    """Pick round(rate * N) samples, stamp the trigger on them, keep the rest benign.

    Each poisoned image gets its own derived seed so RAND placement is
    re-drawn per image.
    """
    if not (0.0 < poisoning_rate < 1.0):
        raise InvalidConfigError(f"poisoning rate {poisoning_rate} outside (0, 1)")
    n = len(surrogate)
    n_poison = int(round(poisoning_rate * n))
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(n, size=n_poison, replace=False).tolist())
    per_image_seeds = rng.integers(0, 2**31 - 1, size=n)
    poisoned, benign = [], []
    for i, img in enumerate(surrogate):
        if i in picked:
            poisoned.append(apply_trigger(img, trigger, seed=int(per_image_seeds[i])))
        else:
            benign.append(img)
    return SurrogateSplit(poisoned=poisoned, benign=benign,
                          poisoning_rate=poisoning_rate)


# --- folder ingest / export -------------------------------------------------
#
# Manifest CSV columns: id,path,split,labels
# where labels is a |-separated list of class indices.


def export_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """Write the bundle as PNG files plus a manifest.csv; returns manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "split", "labels"])
        for split in SPLITS:
            for img in getattr(bundle, split):
                rel = f"images/{img.id}.png"
                arr = np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(out_dir / rel)
                labels = "|".join(str(i) for i in np.flatnonzero(img.label))
                writer.writerow([img.id, rel, split, labels])
    return manifest


def ingest_image_folder(path, manifest=None, image_size: int | None = None,
                        class_count: int | None = None) -> DatasetBundle:
    """Build a DatasetBundle from an image folder described by a manifest CSV."""
    root = Path(path)
    manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
    if not manifest.exists():
        raise IngestError(f"manifest not found: {manifest}")
    rows = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                labels = [int(tok) for tok in row["labels"].split("|") if tok != ""]
                split = row["split"]
                if split not in SPLITS:
                    raise ValueError(f"unknown split {split!r}")
                if not labels:
                    raise ValueError("empty label list")
                rows.append((lineno, row["id"], root / row["path"], split, labels))
            except (KeyError, ValueError, TypeError) as exc:
                raise IngestError(f"manifest row {lineno}: {exc}") from exc
    n_classes = class_count
    if n_classes is None:
        n_classes = 1 + max((max(lbls) for _, _, _, _, lbls in rows), default=-1)
    bundle = DatasetBundle(train=[], query=[], database=[],
                           class_count=max(n_classes, 0))
    for lineno, img_id, img_path, split, labels in rows:
        if not img_path.exists():
            raise IngestError(f"manifest row {lineno}: missing file {img_path}")
        img = Image.open(img_path).convert("RGB")
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
        label = np.zeros(bundle.class_count, dtype=np.uint8)
        label[labels] = 1
        getattr(bundle, split).append(LabeledImage(pixels=pixels, label=label, id=img_id))
    query_ids = {im.id for im in bundle.query}
    db_ids = {im.id for im in bundle.database}
    if query_ids & db_ids:
        raise IngestError(f"query/database id overlap: {sorted(query_ids & db_ids)[:5]}")
    return bundle
