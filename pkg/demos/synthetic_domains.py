"""
A synthetic domain gap
======================

Two datasets share label maps and textures; only the colours differ.  The
target applies a per-class palette offset, a global darkening and extra
noise, which is enough to break a segmenter trained on the source alone.

Writes ``synthetic_domains.png`` (source row, target row, label row).
"""

import numpy as np
from PIL import Image

from lulc_adapt import LULC_SCHEMA, generate_synthetic_domains
from lulc_adapt.synthetic import SHIFT_PRESETS, SOURCE_PALETTE

src, tgt = generate_synthetic_domains(seed=0, n_tiles=6, tile_size=32, shift_spec="satellite")

print("source palette vs target palette")
target_palette = SHIFT_PRESETS["satellite"].target_palette()
for name, a, b in zip(LULC_SCHEMA.names, SOURCE_PALETTE, target_palette):
    print(f"  {name:<12}{a.astype(int)} -> {np.rint(b).astype(int)}")

rows = [np.hstack(list(src.images())), np.hstack(list(tgt.images())),
        np.hstack([LULC_SCHEMA.colorize(lab) for lab in src.labels()])]
Image.fromarray(np.vstack(rows)).resize((6 * 96, 3 * 96), Image.NEAREST).save("synthetic_domains.png")
print("wrote synthetic_domains.png")
