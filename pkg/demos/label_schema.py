"""
Merging CORINE land cover into seven classes
============================================

CORINE level-3 identifiers are three-digit codes (111 continuous urban
fabric, 211 non-irrigated arable land, ...).  The schema folds them into
the seven DeepGlobe-style classes and gives each a display colour.
"""

import numpy as np

from lulc_adapt import LULC_SCHEMA
from lulc_adapt.data import remap_clc_labels

# The schema: code, name, colour
for cls in LULC_SCHEMA.classes:
    print(cls.code, f"{cls.name:<12}", cls.color)

# A toy CLC grid.  141 (green urban areas) and 999 (no data) land in Unknown;
# 700 is not a CLC code at all, so it is counted and also sent to Unknown.
clc = np.array([[111, 211, 311],
                [512, 333, 141],
                [999, 321, 700]])
codes, n_unlisted = remap_clc_labels(clc)
print(codes)
print("unlisted identifiers:", n_unlisted)

# Colour round trip
rgb = LULC_SCHEMA.colorize(codes)
assert np.array_equal(LULC_SCHEMA.decode_colors(rgb), codes)
