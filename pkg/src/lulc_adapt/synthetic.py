"""Synthetic two-domain land-cover tiles for desk-scale experiments.

Both domains share one label-generating process: random ellipses and convex
polygons of classes 1..6 painted over a class-0 background.  Images colour
each class from a base palette and add a class-specific luminance texture
(stripes or speckle), smooth shading and pixel noise.  Textures are the same
in both domains; only colours move: the target domain applies a
:class:`ShiftSpec` on top, i.e. a fixed per-class palette offset, a global
brightness offset and extra additive noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DomainDataset, TilePair
from .schema import N_CLASSES

# Base (source) appearance of each class; rows follow schema codes.
SOURCE_PALETTE = np.array([
    [135, 135, 135],  # unknown
    [175, 110, 110],  # urban
    [180, 170, 95],   # agriculture
    [145, 160, 110],  # rangeland
    [95, 135, 95],    # forest
    [95, 110, 170],   # water
    [185, 180, 165],  # barren
], dtype=np.float64)

# Relative frequency of blob classes 1..6; distinct so class statistics
# differ between classes.
CLASS_WEIGHTS = np.array([0.10, 0.26, 0.14, 0.24, 0.16, 0.10])


@dataclass(frozen=True)
class ShiftSpec:
    brightness: float = 0.0      # added to every channel of target images
    palette_shift: float = 0.0   # length of each per-class colour offset
    noise_std: float = 0.0       # extra Gaussian noise on target images
    palette_seed: int = 0        # fixes the per-class offset directions

    def offsets(self) -> np.ndarray:
        """(n_classes, 3) colour offset applied to target pixels of each class."""
        if self.palette_shift == 0:
            return np.zeros((N_CLASSES, 3))
        rng = np.random.default_rng(self.palette_seed)
        d = rng.normal(size=(N_CLASSES, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.palette_shift * d

    def target_palette(self) -> np.ndarray:
        return SOURCE_PALETTE + self.offsets() + self.brightness

    def to_dict(self) -> dict:
        return asdict(self)


SHIFT_PRESETS: dict[str, ShiftSpec] = {
    "identity": ShiftSpec(),
    "mild": ShiftSpec(brightness=-20.0, palette_shift=20.0, noise_std=4.0),
    "satellite": ShiftSpec(brightness=-50.0, palette_shift=25.0, noise_std=5.0, palette_seed=3),
}

# (kind, scale, amplitude): stripe period in pixels or speckle blur sigma.
CLASS_TEXTURES = (
    ("flat", 0.0, 0.0),
    ("stripes", 4.0, 22.0),
    ("stripes", 8.0, 14.0),
    ("speckle", 1.0, 14.0),
    ("speckle", 1.5, 28.0),
    ("flat", 0.0, 0.0),
    ("speckle", 0.5, 10.0),
)

BASE_NOISE_STD = 5.0
SHADING_AMPLITUDE = 12.0


def _random_label_plane(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(32):
        plane = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(3, 8))):
            cls = 1 + int(rng.choice(6, p=CLASS_WEIGHTS))
            cy, cx = rng.uniform(0, size, size=2)
            if rng.random() < 0.5:
                ry, rx = rng.uniform(0.12, 0.4, size=2) * size
                theta = rng.uniform(0, np.pi)
                dy, dx = yy - cy, xx - cx
                u = dx * np.cos(theta) + dy * np.sin(theta)
                v = -dx * np.sin(theta) + dy * np.cos(theta)
                mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1
            else:
                mask = _convex_polygon_mask(rng, yy, xx, cy, cx, size)
            plane[mask] = cls
        if len(np.unique(plane)) >= 3:
            return plane
    return plane


def _convex_polygon_mask(rng, yy, xx, cy, cx, size):
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.15, 0.45, size=n) * size
    py, px = cy + radii * np.sin(angles), cx + radii * np.cos(angles)
    mask = np.ones(yy.shape, dtype=bool)
    # Inside test against each counter-clockwise edge.
    for i in range(n):
        y0, x0, y1, x1 = py[i], px[i], py[(i + 1) % n], px[(i + 1) % n]
        mask &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return mask


def _texture(rng: np.random.Generator, label: np.ndarray) -> np.ndarray:
    size = label.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros(label.shape)
    for cls, (kind, scale, amp) in enumerate(CLASS_TEXTURES):
        if kind == "stripes":
            theta = rng.uniform(0, np.pi)
            field = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / scale)
        elif kind == "speckle":
            field = gaussian_filter(rng.normal(size=label.shape), scale)
            field /= max(field.std(), 1e-12)
        else:
            continue
        mask = label == cls
        out[mask] = amp * field[mask]
    return out


def _render(label: np.ndarray, palette: np.ndarray, shading: np.ndarray, noise: np.ndarray) -> np.ndarray:
    img = palette[label] + shading[..., None] + noise
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8)


def generate_synthetic_domains(seed: int, n_tiles: int, tile_size: int = 32,
                               shift_spec: ShiftSpec | str = "satellite",
                               *, split: str = "train") -> tuple[DomainDataset, DomainDataset]:
    """Generate paired labeled source/target datasets.

    Tile ``i`` of both domains shares its label plane, shading and base
    noise, so with the identity shift the two images are identical.
    """
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    if isinstance(shift_spec, str):
        shift_spec = SHIFT_PRESETS[shift_spec]
    rng = np.random.default_rng(seed)
    extra_rng = np.random.default_rng([seed, 1])
    target_palette = shift_spec.target_palette()
    src_tiles, tgt_tiles = [], []
    for i in range(n_tiles):
        label = _random_label_plane(rng, tile_size)
        shading = gaussian_filter(rng.normal(size=(tile_size, tile_size)), tile_size / 8)
        shading *= SHADING_AMPLITUDE / max(shading.std(), 1e-12)
        shading += _texture(rng, label)
        noise = rng.normal(scale=BASE_NOISE_STD, size=(tile_size, tile_size, 3))
        tid = f"syn{i:05d}"
        src_tiles.append(TilePair(_render(label, SOURCE_PALETTE, shading, noise), label, tid, "source"))
        extra = 0.0
        if shift_spec.noise_std > 0:
            extra = extra_rng.normal(scale=shift_spec.noise_std, size=noise.shape)
        tgt_tiles.append(TilePair(_render(label, target_palette, shading, noise + extra),
                                  label.copy(), tid, "target"))
    return (DomainDataset("synthetic_source", src_tiles, tile_size, split, True),
            DomainDataset("synthetic_target", tgt_tiles, tile_size, split, True))
