"""Raster preprocessing, tiling, augmentation and on-disk tile datasets.

Arrays are kept in image layout: scenes are ``(H, W, bands)``, tile images
``(H, W, 3)`` uint8 and label planes ``(H, W)`` uint8 class codes.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .schema import LULC_SCHEMA, N_CLASSES, BandSpec, LabelSchema

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Invalid raster, label or dataset content."""


@dataclass
class RasterScene:
    pixels: np.ndarray  # (H, W, bands) unsigned integers
    bit_depth: int
    bands: list[BandSpec]
    pixel_size: float = 1.0
    origin_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3:
            raise DataError(f"scene pixels must be (H, W, bands), got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.unsignedinteger):
            raise DataError(f"scene samples must be unsigned integers, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError("scene grid must be at least 1x1")
        if px.shape[2] != len(self.bands):
            raise DataError(f"{px.shape[2]} pixel bands but {len(self.bands)} band specs")
        if len(self.bands) < 3:
            raise DataError("scene needs at least 3 bands")
        if px.size and int(px.max()) >= 2 ** self.bit_depth:
            raise DataError(f"sample {int(px.max())} exceeds {self.bit_depth}-bit range")

    @property
    def band_ids(self) -> list[str]:
        return [b.band_id for b in self.bands]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(eq=False)
class TilePair:
    image: np.ndarray  # (H, W, 3) uint8
    label: np.ndarray | None  # (H, W) uint8 codes, None when unlabeled
    tile_id: str
    domain_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise DataError(f"tile {self.tile_id}: image must be HxWx3 uint8")
        if self.label is not None:
            if self.label.shape != self.image.shape[:2]:
                raise DataError(
                    f"tile {self.tile_id}: label {self.label.shape} vs image {self.image.shape[:2]}")
            if self.label.size and int(self.label.max()) >= N_CLASSES:
                raise DataError(
                    f"tile {self.tile_id}: label value {int(self.label.max())} out of range 0..{N_CLASSES - 1}")

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TilePair):
            return NotImplemented
        if (self.label is None) != (other.label is None):
            return False
        return (self.tile_id == other.tile_id and self.domain_id == other.domain_id
                and np.array_equal(self.image, other.image)
                and (self.label is None or np.array_equal(self.label, other.label)))


@dataclass
class DomainDataset:
    name: str
    tiles: list[TilePair] = field(default_factory=list)
    tile_size: int = 0
    split: str = "train"
    labeled: bool = True

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.tiles and not self.tile_size:
            self.tile_size = self.tiles[0].size
        for t in self.tiles:
            if t.image.shape[:2] != (self.tile_size, self.tile_size):
                raise DataError(f"tile {t.tile_id} is {t.image.shape[:2]}, dataset tile_size {self.tile_size}")
            if self.labeled and t.label is None:
                raise DataError(f"tile {t.tile_id} has no label in a labeled dataset")

    def __len__(self):
        return len(self.tiles)

    def images(self) -> np.ndarray:
        return np.stack([t.image for t in self.tiles])

    def labels(self) -> np.ndarray:
        return np.stack([t.label for t in self.tiles])

    def class_histogram(self) -> np.ndarray:
        if not self.labeled or not self.tiles:
            return np.zeros(N_CLASSES, dtype=np.int64)
        return np.bincount(self.labels().ravel(), minlength=N_CLASSES)


# --------------------------------------------------------------------------
# radiometry


def quantize_to_8bit(scene: RasterScene, clip_percentiles: tuple[float, float] = (0.02, 0.98)) -> RasterScene:
    """Per-band percentile stretch onto 0..255.

    The ``[p_low, p_high]`` sample percentiles of each band are mapped affinely
    onto ``[0, 255]``; values outside are clipped, then rounded half-to-even.
    """
    low, high = clip_percentiles
    if not 0 <= low < high <= 1:
        raise ValueError(f"need 0 <= low < high <= 1, got {clip_percentiles}")
    if scene.bit_depth <= 8:
        raise ValueError(f"scene is already {scene.bit_depth}-bit")
    px = scene.pixels.astype(np.float64)
    out = np.empty(px.shape, dtype=np.uint8)
    for b, band in enumerate(scene.bands):
        lo, hi = np.percentile(px[..., b], [100 * low, 100 * high])
        if hi <= lo:
            raise DataError(f"constant band {band.band_id}: cannot stretch")
        scaled = (px[..., b] - lo) * (255.0 / (hi - lo))
        out[..., b] = np.rint(np.clip(scaled, 0, 255))
    return replace(scene, pixels=out, bit_depth=8)


def band_statistics(scene: RasterScene) -> list[tuple[float, float]]:
    """Per-band (mean, std) used as a reference for :func:`normalize_illumination`."""
    px = scene.pixels.astype(np.float64)
    return [(float(px[..., b].mean()), float(px[..., b].std())) for b in range(px.shape[2])]


def normalize_illumination(scene: RasterScene, reference_stats: Sequence[tuple[float, float]]) -> RasterScene:
    """Match each band's mean/std to ``reference_stats`` and clip to 0..255."""
    if scene.bit_depth != 8:
        raise ValueError("normalize_illumination expects an 8-bit scene")
    if len(reference_stats) != len(scene.bands):
        raise ValueError(f"{len(reference_stats)} reference stats for {len(scene.bands)} bands")
    px = scene.pixels.astype(np.float64)
    out = np.empty(px.shape, dtype=np.uint8)
    for b, (band, (ref_mean, ref_std)) in enumerate(zip(scene.bands, reference_stats)):
        if not (np.isfinite(ref_mean) and np.isfinite(ref_std) and ref_std > 0):
            raise ValueError(f"band {band.band_id}: reference stats must be finite with std > 0")
        mean, std = px[..., b].mean(), px[..., b].std()
        if std == 0:
            raise DataError(f"zero-variance band {band.band_id}")
        mapped = (px[..., b] - mean) / std * ref_std + ref_mean
        out[..., b] = np.rint(np.clip(mapped, 0, 255))
    return replace(scene, pixels=out)


def select_bands(scene: RasterScene, band_ids: Sequence[str]) -> RasterScene:
    index = {b.band_id: i for i, b in enumerate(scene.bands)}
    missing = [b for b in band_ids if b not in index]
    if missing:
        raise KeyError(f"band(s) {missing} not in scene bands {list(index)}")
    order = [index[b] for b in band_ids]
    return replace(scene, pixels=scene.pixels[..., order],
                   bands=[scene.bands[i] for i in order])


# --------------------------------------------------------------------------
# labels


def remap_clc_labels(clc_grid: np.ndarray, schema: LabelSchema = LULC_SCHEMA) -> tuple[np.ndarray, int]:
    """Merge CLC identifiers into schema codes.

    Returns the code grid and the number of cells whose identifier is not
    listed in the schema; those cells become code 0.
    """
    grid = np.asarray(clc_grid)
    lookup = schema.clc_lookup()
    values, inverse = np.unique(grid, return_inverse=True)
    mapped = np.array([lookup.get(int(v), 0) for v in values], dtype=np.uint8)
    unknown = np.array([int(v) not in lookup for v in values])
    n_unknown = int(np.bincount(inverse.ravel(), minlength=len(values))[unknown].sum())
    if n_unknown:
        logger.warning("%d cells carry CLC identifiers outside the schema; mapped to 0", n_unknown)
    return mapped[inverse].reshape(grid.shape), n_unknown


def upsample_labels(label_grid: np.ndarray, factor) -> np.ndarray:
    """Nearest-neighbour upsampling by a rational ``factor >= 1``."""
    f = Fraction(factor).limit_denominator(10_000)
    if f <= 0:
        raise ValueError(f"upsampling factor must be positive, got {factor}")
    if f < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    grid = np.asarray(label_grid)
    if f.denominator == 1:
        k = f.numerator
        return np.repeat(np.repeat(grid, k, axis=0), k, axis=1)
    h, w = grid.shape[:2]
    out_h, out_w = int(h * f), int(w * f)
    rows = (np.arange(out_h) * f.denominator) // f.numerator
    cols = (np.arange(out_w) * f.denominator) // f.numerator
    return grid[rows[:, None], cols[None, :]]


# --------------------------------------------------------------------------
# tiling and augmentation


def tile_raster(image_scene: RasterScene, label_plane: np.ndarray | None, tile_size: int,
                *, prefix: str = "") -> list[TilePair]:
    """Cut a 3-band 8-bit scene into non-overlapping square tiles.

    Tiles are emitted row-major; partial tiles at the right/bottom edges are
    dropped.
    """
    if image_scene.bit_depth != 8 or image_scene.pixels.shape[2] != 3:
        raise DataError("tiling expects an 8-bit 3-band scene")
    h, w = image_scene.shape
    if label_plane is not None and label_plane.shape != (h, w):
        raise DataError(f"label grid {label_plane.shape} does not match scene {(h, w)}")
    if tile_size < 1 or tile_size > h or tile_size > w:
        raise ValueError(f"tile_size {tile_size} does not fit a {h}x{w} scene")
    img = image_scene.pixels.astype(np.uint8, copy=False)
    tiles = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            win = np.s_[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            lab = None if label_plane is None else label_plane[win].astype(np.uint8).copy()
            tiles.append(TilePair(img[win].copy(), lab, f"{prefix}r{r:03d}_c{c:03d}",
                                  image_scene.origin_id))
    return tiles


def augment(pair: TilePair, seed: int, out_size: int) -> TilePair:
    """Random right-angle rotation followed by a random square crop.

    A rotation by ``k`` quarter turns is clockwise, so pixel ``(r, c)`` of an
    ``N x N`` tile lands on ``(c, N - 1 - r)`` for one quarter turn.
    """
    n = pair.size
    if out_size > n:
        raise ValueError(f"crop {out_size} larger than tile {n}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    top, left = (int(v) for v in rng.integers(0, n - out_size + 1, size=2))
    return TilePair(*rotate_crop(pair.image, pair.label, k, top, left, out_size),
                    tile_id=pair.tile_id, domain_id=pair.domain_id)


def rotate_crop(image: np.ndarray, label: np.ndarray | None, quarter_turns: int, top: int, left: int,
                size: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Rotate clockwise by ``quarter_turns`` * 90 degrees, then crop a ``size`` window."""
    k = quarter_turns
    win = np.s_[top:top + size, left:left + size]
    image = np.ascontiguousarray(np.rot90(image, -k)[win])
    if label is not None:
        label = np.ascontiguousarray(np.rot90(label, -k)[win])
    return image, label


# --------------------------------------------------------------------------
# dataset I/O


def write_dataset(dataset: DomainDataset, root: str | os.PathLike) -> Path:
    """Write PNG tiles plus ``manifest.json``; the manifest is written last."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if dataset.labeled:
        (root / "labels").mkdir(exist_ok=True)
    entries = []
    for t in dataset.tiles:
        Image.fromarray(t.image, mode="RGB").save(root / "images" / f"{t.tile_id}.png")
        has_label = t.label is not None
        if has_label:
            (root / "labels").mkdir(exist_ok=True)
            Image.fromarray(t.label, mode="L").save(root / "labels" / f"{t.tile_id}.png")
        entries.append({"tile_id": t.tile_id, "domain_id": t.domain_id, "label": has_label})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": dataset.name,
        "tile_size": dataset.tile_size,
        "split": dataset.split,
        "labeled": dataset.labeled,
        "tiles": entries,
    }
    path = root / "manifest.json"
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, path)
    return path


def read_dataset(root: str | os.PathLike) -> DomainDataset:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        version = manifest["format_version"]
        name, tile_size = manifest["name"], int(manifest["tile_size"])
        split, labeled, entries = manifest["split"], bool(manifest["labeled"]), manifest["tiles"]
    except FileNotFoundError:
        raise DataError(f"no manifest at {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    if version != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {version}")
    tiles = []
    for entry in entries:
        tid = entry["tile_id"]
        image = np.asarray(Image.open(root / "images" / f"{tid}.png").convert("RGB"))
        label = None
        if entry.get("label", labeled):
            with Image.open(root / "labels" / f"{tid}.png") as im:
                if im.mode != "L":
                    raise DataError(f"tile {tid}: label must be single-channel 8-bit, got {im.mode}")
                label = np.asarray(im)
            if label.shape != image.shape[:2]:
                raise DataError(f"tile {tid}: label {label.shape} vs image {image.shape[:2]}")
            if label.size and label.max() >= N_CLASSES:
                raise DataError(f"tile {tid}: label value {int(label.max())} > {N_CLASSES - 1}")
        tiles.append(TilePair(image, label, tid, entry.get("domain_id", "")))
    return DomainDataset(name, tiles, tile_size, split, labeled)


def read_raster(paths: str | os.PathLike | Sequence[str | os.PathLike], bands: Sequence[BandSpec],
                *, bit_depth: int = 12, origin_id: str = "", pixel_size: float = 1.0) -> RasterScene:
    """Load a GeoTIFF-compatible raster (one multi-band file or one file per band).

    Floating-point samples (12-bit data stored as float32) are rounded.
    """
    import tifffile

    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    planes = []
    for p in paths:
        arr = np.asarray(tifffile.imread(p))
        if arr.ndim == 2:
            arr = arr[..., None]
        elif arr.ndim == 3 and arr.shape[0] < arr.shape[-1] and arr.shape[0] <= 16:
            arr = np.moveaxis(arr, 0, -1)  # band-first layout
        planes.append(arr)
    shapes = {a.shape[:2] for a in planes}
    if len(shapes) != 1:
        raise DataError(f"band files have different grids: {sorted(shapes)}")
    px = np.concatenate(planes, axis=-1)
    if np.issubdtype(px.dtype, np.floating):
        px = np.rint(np.nan_to_num(px, nan=0.0)).clip(0, 2 ** bit_depth - 1)
    dtype = np.uint8 if bit_depth <= 8 else np.uint16
    return RasterScene(px.astype(dtype), bit_depth, list(bands), pixel_size, origin_id)


def read_label_raster(path: str | os.PathLike) -> np.ndarray:
    import tifffile

    arr = np.asarray(tifffile.imread(path))
    if arr.ndim != 2:
        raise DataError(f"CLC raster {path} must be single-band, got shape {arr.shape}")
    return arr
