"""Segmentation, adversarial, reconstruction and perceptual objectives.

Adversarial terms use the least-squares surrogate: a discriminator is pushed
towards 1 on real samples and 0 on fake ones.  Generator-side terms evaluate
the discriminator through :func:`~lulc_adapt.models.frozen_forward`, so they
never produce gradients for discriminator parameters.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as nnf

from .models import ModelHandles, frozen_forward


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.001
    lambda_GAN: float = 1.0
    lambda_recon: float = 10.0
    lambda_per: float = 0.1
    lambda_perA: float = 0.1
    lambda_perB: float = 0.1
    lambda_per_recon: float = 0.1
    lambda_D: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        try:
            return cls(**WEIGHT_PRESETS[name])
        except KeyError:
            raise KeyError(f"unknown loss preset {name!r}; choose from {sorted(WEIGHT_PRESETS)}") from None

    def replace(self, **changes) -> "LossWeights":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def uses_perceptual(self) -> bool:
        return max(self.lambda_perA, self.lambda_perB, self.lambda_per_recon) > 0


WEIGHT_PRESETS: dict[str, dict] = {
    "wv2_to_dg": {"lambda_D": 1.5, "lambda_perA": 0.5, "lambda_perB": 0.1},
    "sen_to_dg": {"lambda_D": 100.0, "lambda_perA": 2.0, "lambda_perB": 0.5},
    # no published coefficients; defaults
    "sen_to_wv2": {},
    "wv2fi_to_plfi": {},
    "wv2gr_to_wv2fi": {},
    "synthetic": {"lambda_D": 1.0, "lambda_perA": 0.1, "lambda_perB": 0.1,
                  "lambda_per_recon": 0.1, "lambda_adv": 0.001},
}


@dataclass
class LossBreakdown:
    """Named loss components, their coefficients and the weighted total."""

    terms: dict[str, torch.Tensor]
    coefficients: dict[str, float]
    total: torch.Tensor
    extras: dict = field(default_factory=dict, repr=False)

    def values(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.terms.items()}

    def weighted_sum(self) -> float:
        return sum(self.coefficients[k] * float(v.detach()) for k, v in self.terms.items())

    def to_json_line(self, step: int, **meta) -> str:
        return json.dumps({"step": step, **meta, **self.values(), "total": float(self.total.detach())})


def _breakdown(terms, coefficients, **extras) -> LossBreakdown:
    total = sum(coefficients[k] * v for k, v in terms.items())
    return LossBreakdown(terms, coefficients, total, extras)


# --------------------------------------------------------------------------
# segmentation network objectives


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy; ``logits`` is (N, C, H, W), ``labels`` (N, H, W)."""
    n_classes = logits.shape[1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return nnf.cross_entropy(logits, labels)


def adv_out_loss(D_out, logits_target: torch.Tensor) -> torch.Tensor:
    """Generator side of output-space alignment: make target maps look source-like."""
    score = frozen_forward(D_out, torch.softmax(logits_target, dim=1))
    return ((score - 1) ** 2).mean()


def d_out_loss(D_out, logits_translated_source: torch.Tensor, logits_target: torch.Tensor) -> torch.Tensor:
    """Output-space discriminator objective (translated source -> 1, target -> 0)."""
    real = D_out(torch.softmax(logits_translated_source.detach(), dim=1))
    fake = D_out(torch.softmax(logits_target.detach(), dim=1))
    return ((real - 1) ** 2).mean() + (fake ** 2).mean()


def total_M_loss(weights: LossWeights, D_out, logits_translated_source, labels_source,
                 logits_target) -> LossBreakdown:
    terms = {"seg": seg_loss(logits_translated_source, labels_source)}
    coefficients = {"seg": 1.0}
    if D_out is not None:
        terms["adv"] = adv_out_loss(D_out, logits_target)
        coefficients["adv"] = weights.lambda_adv
    return _breakdown(terms, coefficients)


# --------------------------------------------------------------------------
# translation network objectives


def gan_loss(D, real_batch, fake_batch, side: str, lambda_D: float = 1.0) -> torch.Tensor:
    """Least-squares GAN loss for one direction, scaled by ``lambda_D``.

    ``side="generator"`` ignores ``real_batch`` and does not touch the
    discriminator's parameters; ``side="discriminator"`` detaches
    ``fake_batch``.
    """
    if lambda_D < 0:
        raise ValueError("lambda_D must be >= 0")
    if side == "generator":
        return lambda_D * ((frozen_forward(D, fake_batch) - 1) ** 2).mean()
    if side == "discriminator":
        real = ((D(real_batch) - 1) ** 2).mean()
        fake = (D(fake_batch.detach()) ** 2).mean()
        return lambda_D * (real + fake)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def recon_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


def _frozen_probs(M, batch):
    was_training = M.training
    M.eval()
    try:
        return torch.softmax(frozen_forward(M, batch), dim=1)
    finally:
        M.train(was_training)


def perceptual_loss(M_frozen, batch_a: torch.Tensor, batch_b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of the segmenter's class probabilities on two batches.

    The segmenter runs in eval mode with its parameters outside the graph.
    """
    return recon_loss(_frozen_probs(M_frozen, batch_a), _frozen_probs(M_frozen, batch_b))


def _translate_both(handles: ModelHandles, S, T):
    S_t = handles.F(S)
    T_t = handles.F_inv(T)
    return S_t, T_t, handles.F_inv(S_t), handles.F(T_t)


def total_F_loss(weights: LossWeights, handles: ModelHandles, S: torch.Tensor, T: torch.Tensor) -> LossBreakdown:
    """Translation objective with separate source/target perceptual weights.

    ``extras`` carries the translated batches ``S_t = F(S)`` and
    ``T_t = F_inv(T)`` for the discriminator update.
    """
    S_t, T_t, S_cyc, T_cyc = _translate_both(handles, S, T)
    terms = {
        "gan": gan_loss(handles.D_T, T, S_t, "generator", weights.lambda_D)
               + gan_loss(handles.D_S, S, T_t, "generator", weights.lambda_D),
        "recon": recon_loss(S, S_cyc) + recon_loss(T, T_cyc),
    }
    coefficients = {"gan": weights.lambda_GAN, "recon": weights.lambda_recon}
    if weights.uses_perceptual:
        M = handles.M
        if M is None:
            raise ValueError("perceptual weights are non-zero but no segmenter was given")
        terms["perA"] = perceptual_loss(M, S, S_t)
        terms["perB"] = perceptual_loss(M, T, T_t)
        terms["per_recon"] = perceptual_loss(M, S, S_cyc) + perceptual_loss(M, T, T_cyc)
        coefficients.update(perA=weights.lambda_perA, perB=weights.lambda_perB,
                            per_recon=weights.lambda_per_recon)
    return _breakdown(terms, coefficients, S_t=S_t, T_t=T_t)


def total_F_loss_shared(weights: LossWeights, handles: ModelHandles, S: torch.Tensor, T: torch.Tensor) -> LossBreakdown:
    """Original form: one perceptual weight ``lambda_per`` for both directions, no ``lambda_D``."""
    S_t, T_t, S_cyc, T_cyc = _translate_both(handles, S, T)
    M = handles.M

    def per(x, x_t, x_cyc):
        return (weights.lambda_per * perceptual_loss(M, x, x_t)
                + weights.lambda_per_recon * perceptual_loss(M, x, x_cyc))

    terms = {
        "gan": gan_loss(handles.D_T, T, S_t, "generator") + gan_loss(handles.D_S, S, T_t, "generator"),
        "recon": recon_loss(S, S_cyc) + recon_loss(T, T_cyc),
        "per": per(S, S_t, S_cyc) + per(T, T_t, T_cyc),
    }
    coefficients = {"gan": weights.lambda_GAN, "recon": weights.lambda_recon, "per": 1.0}
    return _breakdown(terms, coefficients, S_t=S_t, T_t=T_t)


def translation_discriminator_loss(weights: LossWeights, handles: ModelHandles, S, T, S_t, T_t) -> torch.Tensor:
    """Discriminator update for both image domains; ``lambda_D`` enters as in :func:`total_F_loss`."""
    return weights.lambda_GAN * (gan_loss(handles.D_T, T, S_t, "discriminator", weights.lambda_D)
                                 + gan_loss(handles.D_S, S, T_t, "discriminator", weights.lambda_D))
