"""
From a 12-bit scene to training tiles
=====================================

A fake four-band Sentinel-2 scene goes through the preparation chain:
percentile stretch to 8 bit, RGB band selection, label upsampling from a
coarser CLC grid, and tiling at the sensor's preset tile size.
"""

import numpy as np

from lulc_adapt.data import (DomainDataset, quantize_to_8bit, remap_clc_labels, select_bands,
                             tile_raster, upsample_labels)
from lulc_adapt.data import RasterScene
from lulc_adapt.schema import SATELLITES

rng = np.random.default_rng(0)
preset = SATELLITES["sentinel2"]

# 448 x 448 pixels, bands in preset order (B2, B3, B4, B8), 12-bit samples
pixels = rng.gamma(4.0, 300.0, size=(448, 448, 4)).clip(0, 4095).astype(np.uint16)
scene = RasterScene(pixels, 12, list(preset.bands), pixel_size=10.0, origin_id="demo")

# A 2nd-98th percentile stretch keeps a few bright outliers from
# flattening the rest of the histogram.
scene8 = quantize_to_8bit(scene, (0.02, 0.98))
rgb = select_bands(scene8, preset.rgb)
print("bands:", rgb.band_ids, "dtype:", rgb.pixels.dtype)

# Labels come on a grid twice as coarse
clc = rng.choice([112, 211, 231, 311, 512], size=(224, 224))
codes, _ = remap_clc_labels(clc)
labels = upsample_labels(codes, 2)

tiles = tile_raster(rgb, labels, preset.tile_size, prefix="demo_")
ds = DomainDataset("sentinel_demo", tiles, preset.tile_size)
print(len(ds), "tiles:", [t.tile_id for t in ds.tiles])
print("class histogram:", ds.class_histogram())
