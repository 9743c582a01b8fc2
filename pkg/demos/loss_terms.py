"""
The translation objective, term by term
=======================================

Builds the small generator/discriminator pairs and a segmenter, evaluates
the translation loss on one batch and prints each term with its weight.
The perceptual terms compare the segmenter's class probabilities before
and after translation; the segmenter itself gets no gradient.
"""

import torch

from lulc_adapt import (LossWeights, ModelHandles, SegmentationModelSpec, TranslationModelSpec,
                        build_segmenter, build_translation)
from lulc_adapt.losses import total_F_loss

F, F_inv, D_T, D_S = build_translation(TranslationModelSpec.preset("tiny"), seed=0)
M, _ = build_segmenter(SegmentationModelSpec.preset("tiny"), seed=1)
handles = ModelHandles(F, F_inv, D_T, D_S, M)

g = torch.Generator().manual_seed(0)
S = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
T = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1

for preset in ("wv2_to_dg", "sen_to_dg"):
    w = LossWeights.preset(preset)
    b = total_F_loss(w, handles, S, T)
    print(preset)
    for name, value in b.values().items():
        print(f"  {name:<10}{value:9.4f}  x {b.coefficients[name]}")
    print(f"  total     {b.total.item():9.4f}")

b.total.backward()
print("segmenter gradients:", sum(p.grad is not None for p in M.parameters()))
