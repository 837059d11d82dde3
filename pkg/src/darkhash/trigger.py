"""Trigger composition.

A poisoned image is x * (1 - alpha*m) + alpha * t * m where m is a binary
mask holding an s x s block at a fixed corner (or a random offset) and t
is the trigger pattern. With alpha = 1 this is the classic patch
composition x * (1 - m) + t * m; alpha < 1 alpha-blends inside the mask
only, so pixels outside the mask are always bit-identical to the input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from PIL import Image

LOCATIONS = ("UL", "LL", "UR", "LR", "RAND")


class InvalidTriggerError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerSpec:
    """Patch pattern plus placement and blending controls.

    pattern: (s, s, C) float array in [0, 1]
    location: one of UL, LL, UR, LR, RAND
    transparency: alpha in (0, 1]; 1 replaces pixels outright
    """

    pattern: np.ndarray
    size: int
    location: str = "LR"
    transparency: float = 1.0

    def __post_init__(self) -> None:
        pat = np.asarray(self.pattern, dtype=np.float32)
        object.__setattr__(self, "pattern", pat)
        if pat.ndim != 3 or pat.shape[0] != self.size or pat.shape[1] != self.size:
            raise InvalidTriggerError(
                f"pattern shape {pat.shape} does not match size {self.size}"
            )
        if pat.min() < 0.0 or pat.max() > 1.0:
            raise InvalidTriggerError("pattern values must lie in [0, 1]")
        if self.location not in LOCATIONS:
            raise InvalidTriggerError(f"unknown location {self.location!r}")
        if not (0.0 < self.transparency <= 1.0):
            raise InvalidTriggerError("transparency must be in (0, 1]")


def solid_trigger(size: int, channels: int = 3, color=(1.0, 1.0, 1.0),
                  location: str = "LR", transparency: float = 1.0) -> TriggerSpec:
    """Simple solid color-block trigger (the default pattern)."""
    color = np.asarray(color, dtype=np.float32)[:channels]
    pattern = np.broadcast_to(color, (size, size, channels)).copy()
    return TriggerSpec(pattern=pattern, size=size, location=location,
                       transparency=transparency)


def load_trigger_png(path, size: int, location: str = "LR",
                     transparency: float = 1.0) -> TriggerSpec:
    """Load a trigger pattern from a PNG, resized to size x size."""
    img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
    pattern = np.asarray(img, dtype=np.float32) / 255.0
    return TriggerSpec(pattern=pattern, size=size, location=location,
                       transparency=transparency)


def _block_origin(spec: TriggerSpec, h: int, w: int, seed=None) -> tuple[int, int]:
    s = spec.size
    if s > min(h, w):
        raise InvalidTriggerError(f"trigger size {s} exceeds image {h}x{w}")
    if spec.location == "UL":
        return 0, 0
    if spec.location == "LL":
        return h - s, 0
    if spec.location == "UR":
        return 0, w - s
    if spec.location == "LR":
        return h - s, w - s
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))


def build_mask(spec: TriggerSpec, h: int, w: int, seed=None) -> np.ndarray:
    """Binary (h, w) mask with ones exactly on the trigger block."""
    r0, c0 = _block_origin(spec, h, w, seed)
    mask = np.zeros((h, w), dtype=np.float32)
    mask[r0:r0 + spec.size, c0:c0 + spec.size] = 1.0
    return mask


def apply_trigger_pixels(pixels: np.ndarray, spec: TriggerSpec, seed=None) -> np.ndarray:
    """Compose the trigger onto one (H, W, C) image array."""
    h, w, c = pixels.shape
    if spec.pattern.shape[2] != c:
        raise InvalidTriggerError(
            f"pattern has {spec.pattern.shape[2]} channels, image has {c}"
        )
    r0, c0 = _block_origin(spec, h, w, seed)
    s, a = spec.size, spec.transparency
    out = np.array(pixels, dtype=np.float32, copy=True)
    block = out[r0:r0 + s, c0:c0 + s]
    out[r0:r0 + s, c0:c0 + s] = (1.0 - a) * block + a * spec.pattern
    return out


def apply_trigger(x, spec: TriggerSpec, seed=None):
    """Return a copy of LabeledImage ``x`` with the trigger composed in.

    The label is left unchanged (clean-label composition; relabeling, if
    any, is the caller's concern).
    """
    return dataclasses.replace(x, pixels=apply_trigger_pixels(x.pixels, spec, seed))
