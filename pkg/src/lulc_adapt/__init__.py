"""Unsupervised domain adaptation for land-cover segmentation across satellite sensors."""

from .schema import LULC_SCHEMA, N_CLASSES, SATELLITES, BandSpec, LabelSchema
from .data import (DataError, DomainDataset, RasterScene, TilePair, augment, normalize_illumination,
                   quantize_to_8bit, read_dataset, remap_clc_labels, select_bands, tile_raster,
                   upsample_labels, write_dataset)
from .synthetic import SHIFT_PRESETS, ShiftSpec, generate_synthetic_domains
from .models import (ModelHandles, SegmentationModelSpec, TranslationModelSpec, build_segmenter,
                     build_translation, discriminate, segment, translate)
from .losses import LossBreakdown, LossWeights
from .evaluation import ConfusionMatrix, EvalReport, iou_per_class, miou, render_report
from .trainer import TrainConfig, run_bdl, synthetic_config

__version__ = "0.1.0"
