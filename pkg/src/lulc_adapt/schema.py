"""Land-cover class taxonomy, Corine Land Cover (CLC) merge table and sensor presets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LabelClass:
    code: int
    name: str
    color: tuple[int, int, int]
    clc_source_codes: frozenset[int] = field(default_factory=frozenset)


@dataclass(frozen=True)
class LabelSchema:
    classes: tuple[LabelClass, ...]

    def __post_init__(self):
        codes = [c.code for c in self.classes]
        if codes != list(range(len(codes))):
            raise ValueError(f"class codes must be contiguous from 0, got {codes}")
        if len(codes) < 2:
            raise ValueError("schema needs at least two classes")
        if self.classes[0].name != "Unknown":
            raise ValueError("code 0 must be the 'Unknown' class")
        seen: dict[int, int] = {}
        for c in self.classes:
            for clc in c.clc_source_codes:
                if clc in seen:
                    raise ValueError(
                        f"CLC code {clc} claimed by classes {seen[clc]} and {c.code}")
                seen[clc] = c.code

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def palette(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def clc_lookup(self) -> dict[int, int]:
        return {clc: c.code for c in self.classes for clc in c.clc_source_codes}

    def colorize(self, codes: np.ndarray) -> np.ndarray:
        """Render a code grid as an RGB image with the schema palette."""
        return self.palette[np.asarray(codes)]

    def decode_colors(self, rgb: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`colorize` for RGB-coded label images.

        Pixels whose color is not in the palette become code 0.
        """
        rgb = np.asarray(rgb)
        out = np.zeros(rgb.shape[:2], dtype=np.uint8)
        for c in self.classes:
            out[np.all(rgb == np.array(c.color), axis=-1)] = c.code
        return out


# CLC level-3 nomenclature (44 classes).
CLC_LEVEL3_CODES: tuple[int, ...] = (
    111, 112, 121, 122, 123, 124, 131, 132, 133, 141, 142,
    211, 212, 213, 221, 222, 223, 231, 241, 242, 243, 244,
    311, 312, 313, 321, 322, 323, 324, 331, 332, 333, 334, 335,
    411, 412, 421, 422, 423,
    511, 512, 521, 522, 523,
)
# No-data / unclassified codes used by CLC raster products.
CLC_NODATA_CODES: tuple[int, ...] = (990, 995, 999)


def _clc(*prefixes: str) -> frozenset[int]:
    return frozenset(c for c in CLC_LEVEL3_CODES if str(c).startswith(prefixes))


LULC_SCHEMA = LabelSchema((
    LabelClass(0, "Unknown", (0, 0, 0), _clc("14") | frozenset(CLC_NODATA_CODES)),
    LabelClass(1, "Urban", (0, 255, 255), _clc("11", "12", "13")),
    LabelClass(2, "Agriculture", (255, 255, 0), _clc("2")),
    LabelClass(3, "Rangeland", (255, 0, 255), _clc("32", "4")),
    LabelClass(4, "Forest", (0, 255, 0), _clc("31")),
    LabelClass(5, "Water", (0, 0, 255), _clc("5")),
    LabelClass(6, "Barren", (255, 255, 255), _clc("33")),
))

N_CLASSES = LULC_SCHEMA.n_classes

# CLC GeoTIFF products store the 44 classes as raster values 1..44 in
# nomenclature order; 48 is the no-data value.
CLC_RASTER_INDEX: dict[int, int] = {i + 1: code for i, code in enumerate(CLC_LEVEL3_CODES)}
CLC_RASTER_INDEX[48] = 999


@dataclass(frozen=True)
class BandSpec:
    band_id: str
    central_wavelength: float  # nm
    bandwidth: float  # nm
    spatial_resolution: float  # m/px

    def __post_init__(self):
        if self.central_wavelength <= 0 or self.bandwidth <= 0 or self.spatial_resolution <= 0:
            raise ValueError(f"band {self.band_id}: wavelength, bandwidth and resolution must be > 0")


@dataclass(frozen=True)
class SatellitePreset:
    name: str
    bands: tuple[BandSpec, ...]
    rgb: tuple[str, str, str]
    tile_size: int
    bit_depth: int = 12


SATELLITES: dict[str, SatellitePreset] = {
    "sentinel2": SatellitePreset(
        "sentinel2",
        (BandSpec("B2", 492.1, 66, 10), BandSpec("B3", 559, 36, 10),
         BandSpec("B4", 665, 31, 10), BandSpec("B8", 833, 106, 10)),
        rgb=("B4", "B3", "B2"), tile_size=224),
    "worldview2": SatellitePreset(
        "worldview2",
        (BandSpec("B2", 480, 60, 1.84), BandSpec("B3", 545, 70, 1.84),
         BandSpec("B5", 660, 60, 1.84), BandSpec("B7", 833, 125, 1.84)),
        rgb=("B5", "B3", "B2"), tile_size=512),
    "pleiades1": SatellitePreset(
        "pleiades1",
        (BandSpec("B2", 490, 120, 2), BandSpec("B3", 550, 120, 2),
         BandSpec("B4", 660, 120, 2), BandSpec("B5", 850, 200, 2)),
        rgb=("B4", "B3", "B2"), tile_size=448),
    # Already 8-bit RGB; wavelengths are nominal visible-band centres.
    "deepglobe": SatellitePreset(
        "deepglobe",
        (BandSpec("R", 660, 60, 0.5), BandSpec("G", 545, 70, 0.5),
         BandSpec("B", 480, 60, 0.5)),
        rgb=("R", "G", "B"), tile_size=612, bit_depth=8),
}
