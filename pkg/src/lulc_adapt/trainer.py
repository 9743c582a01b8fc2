"""Bidirectional training schedule.

``run_bdl`` trains a baseline segmenter on the labeled source, then for each
round trains the image translators guided by the current (frozen) segmenter,
translates the source dataset and re-trains the segmenter on it with
output-space adversarial alignment against the target.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from . import losses
from .data import DataError, DomainDataset, TilePair, rotate_crop
from .evaluation import ConfusionMatrix, EvalReport
from .losses import LossWeights
from .models import (ModelHandles, SegmentationModelSpec, TranslationModelSpec, build_segmenter,
                     build_translation, parameter_digest, save_model)

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class DivergenceError(RuntimeError):
    """A loss became non-finite."""


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "adam"
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    power: float = 0.9  # polynomial decay exponent; 0 keeps lr constant

    def build(self, params) -> torch.optim.Optimizer:
        if self.kind == "sgd":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)
        if self.kind == "adam":
            return torch.optim.Adam(params, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)
        raise ConfigError(f"unknown optimizer kind {self.kind!r}")

    def lr_at(self, it: int, max_it: int) -> float:
        if self.power == 0:
            return self.lr
        return self.lr * (1 - it / max_it) ** self.power


def _seg_sgd():
    return OptimizerConfig("sgd", lr=2.5e-4, momentum=0.9, weight_decay=5e-4, power=0.9)


def _gan_adam():
    return OptimizerConfig("adam", lr=2e-4, weight_decay=0.0, betas=(0.5, 0.999), power=0.0)


@dataclass
class TrainConfig:
    total_iterations: int = 250_000
    baseline_iterations: int | None = None
    translation_iterations: int | None = None
    adapted_iterations: int | None = None
    batch_size: int = 4
    crop_size: int | None = None
    augment: bool = True
    seed: int = 0
    bdl_rounds: int = 2
    snapshot_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    preset_name: str | None = None
    seg_optimizer: OptimizerConfig = field(default_factory=_seg_sgd)
    gan_optimizer: OptimizerConfig = field(default_factory=_gan_adam)
    d_out_optimizer: OptimizerConfig = field(default_factory=_gan_adam)
    translation_model: TranslationModelSpec = field(default_factory=TranslationModelSpec)
    segmentation_model: SegmentationModelSpec = field(default_factory=SegmentationModelSpec)
    # "continue": each adapted phase starts from the previous segmenter
    seg_init: str = "continue"

    def __post_init__(self):
        if self.total_iterations < 1 or self.batch_size < 1 or self.bdl_rounds < 1:
            raise ConfigError("total_iterations, batch_size and bdl_rounds must be >= 1")
        if self.seg_init not in ("continue", "fresh"):
            raise ConfigError(f"seg_init must be 'continue' or 'fresh', got {self.seg_init!r}")

    def iterations(self, phase: str) -> int:
        n = getattr(self, f"{phase}_iterations")
        return self.total_iterations if n is None else n

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_NESTED = {"weights": LossWeights, "seg_optimizer": OptimizerConfig, "gan_optimizer": OptimizerConfig,
           "d_out_optimizer": OptimizerConfig, "translation_model": TranslationModelSpec,
           "segmentation_model": SegmentationModelSpec}


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} config must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for k, v in d.items():
        if cls is TrainConfig and k in _NESTED:
            v = _from_dict(_NESTED[k], v)
        elif k == "betas":
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def synthetic_config(**overrides) -> TrainConfig:
    """Desk-scale settings for the synthetic two-domain benchmark."""
    cfg = dict(
        total_iterations=600,
        batch_size=8,
        crop_size=None,
        bdl_rounds=1,
        weights=LossWeights.preset("synthetic"),
        preset_name="synthetic",
        seg_optimizer=OptimizerConfig("adam", lr=2e-3, weight_decay=0.0, betas=(0.9, 0.999), power=0.9),
        gan_optimizer=OptimizerConfig("adam", lr=1e-3, weight_decay=0.0, betas=(0.5, 0.999), power=0.0),
        d_out_optimizer=OptimizerConfig("adam", lr=1e-4, weight_decay=0.0, betas=(0.5, 0.999), power=0.0),
        translation_model=TranslationModelSpec.preset("tiny"),
        segmentation_model=SegmentationModelSpec.preset("tiny"),
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


# --------------------------------------------------------------------------
# batches


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 127.5 - 1


def to_uint8(batch: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor`."""
    x = ((batch.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


class BatchSampler:
    """Endless shuffled batches with per-sample rotation/crop augmentation.

    Each pass over the dataset uses a fresh permutation; a batch larger
    than the dataset simply spans several passes.
    """

    def __init__(self, dataset: DomainDataset, batch_size: int, seed: int, *,
                 crop_size: int | None = None, augment: bool = True, with_labels: bool = True):
        if len(dataset) == 0:
            raise DataError(f"dataset {dataset.name!r} is empty")
        if with_labels and not dataset.labeled:
            raise DataError(f"dataset {dataset.name!r} is unlabeled")
        self.dataset, self.batch_size = dataset, batch_size
        self.crop_size = crop_size or dataset.tile_size
        if self.crop_size > dataset.tile_size:
            raise ConfigError(f"crop_size {self.crop_size} exceeds tile size {dataset.tile_size}")
        self.augment, self.with_labels = augment, with_labels
        self.rng = np.random.default_rng(seed)
        self.order: np.ndarray = np.empty(0, dtype=np.int64)
        self.pos = 0

    def _next_index(self) -> int:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.dataset))
            self.pos = 0
        self.pos += 1
        return int(self.order[self.pos - 1])

    def next(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        images, labels = [], []
        n, size = self.dataset.tile_size, self.crop_size
        for _ in range(self.batch_size):
            t = self.dataset.tiles[self._next_index()]
            label = t.label if self.with_labels else None
            if self.augment:
                k = int(self.rng.integers(4))
                top, left = (int(v) for v in self.rng.integers(0, n - size + 1, size=2))
                img, label = rotate_crop(t.image, label, k, top, left, size)
            else:
                img = t.image[:size, :size]
                label = None if label is None else label[:size, :size]
            images.append(img)
            labels.append(label)
        x = to_tensor(np.stack(images))
        y = torch.from_numpy(np.stack(labels).astype(np.int64)) if self.with_labels else None
        return x, y

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(), "pos": self.pos}

    def load_state_dict(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = state["pos"]


# --------------------------------------------------------------------------
# phase plumbing


@dataclass
class PhaseResult:
    name: str
    models: dict[str, nn.Module]
    history: list[dict]
    checkpoint: Path | None = None

    def __getitem__(self, key):
        return self.models[key]


class _Phase:
    """Shared loop state: logging, divergence guard, snapshots, resume."""

    def __init__(self, name, config, models, specs, optimizers, samplers, max_it, run_dir, resume_from):
        self.name, self.config, self.models, self.specs = name, config, models, specs
        self.optimizers, self.samplers, self.max_it = optimizers, samplers, max_it
        self.dir = None if run_dir is None else Path(run_dir) / name
        self.log_path = None if run_dir is None else Path(run_dir) / "loss_log.jsonl"
        if run_dir is not None:
            Path(run_dir).mkdir(parents=True, exist_ok=True)
        self.history: list[dict] = []
        self.start = 0
        if resume_from is not None:
            self._restore(Path(resume_from))

    def record(self, it: int, breakdown: dict[str, float]):
        for k, v in breakdown.items():
            if not math.isfinite(v):
                raise DivergenceError(f"{self.name}: loss term {k!r} became {v} at iteration {it}")
        entry = {"phase": self.name, "step": it, **breakdown}
        self.history.append(entry)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")

    def maybe_snapshot(self, it: int) -> Path | None:
        every = self.config.snapshot_every
        if self.dir is not None and (it == self.max_it or (every and it % every == 0)):
            return self.save(it)
        return None

    def save(self, it: int) -> Path:
        ckpt = self.dir / f"ckpt_{it}"
        ckpt.mkdir(parents=True, exist_ok=True)
        for role, module in self.models.items():
            save_model(ckpt / f"{role}.pt", module, self.specs[role], role)
        torch.save({
            "format_version": BUNDLE_VERSION,
            "phase": self.name,
            "iteration": it,
            "config_hash": self.config.config_hash(),
            "config": self.config.to_dict(),
            "models": {k: m.state_dict() for k, m in self.models.items()},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "samplers": {k: s.state_dict() for k, s in self.samplers.items()},
            "torch_rng": torch.get_rng_state(),
            "history": self.history,
        }, ckpt / "bundle.pt")
        return ckpt

    def _restore(self, path: Path):
        bundle = torch.load(path / "bundle.pt" if path.is_dir() else path, map_location="cpu",
                            weights_only=False)
        if bundle.get("format_version") != BUNDLE_VERSION:
            raise ConfigError(f"{path}: unsupported bundle version")
        if bundle["phase"] != self.name:
            raise ConfigError(f"{path}: bundle is for phase {bundle['phase']!r}, not {self.name!r}")
        if bundle["config_hash"] != self.config.config_hash():
            raise ConfigError(f"{path}: checkpoint was written with a different config")
        for k, m in self.models.items():
            m.load_state_dict(bundle["models"][k])
        for k, o in self.optimizers.items():
            o.load_state_dict(bundle["optimizers"][k])
        for k, s in self.samplers.items():
            s.load_state_dict(bundle["samplers"][k])
        torch.set_rng_state(bundle["torch_rng"])
        self.history = list(bundle["history"])
        self.start = bundle["iteration"]

    def set_lr(self, key: str, opt_cfg: OptimizerConfig, it: int):
        for g in self.optimizers[key].param_groups:
            g["lr"] = opt_cfg.lr_at(it, self.max_it)


def _phase_seed(config: TrainConfig, phase: str, rnd: int) -> int:
    return int(np.random.SeedSequence([config.seed, rnd, {"baseline": 0, "translation": 1,
                                                          "adapted": 2}[phase]]).generate_state(1)[0])


def _params(*modules):
    return [p for m in modules for p in m.parameters()]


# --------------------------------------------------------------------------
# phases


def train_segmenter_baseline(config: TrainConfig, source: DomainDataset, target: DomainDataset | None = None,
                             *, M: nn.Module | None = None, run_dir=None, resume_from=None,
                             name: str = "round0_baseline") -> PhaseResult:
    """Source-only segmentation training with cross-entropy; ``target`` is ignored."""
    if not source.labeled:
        raise DataError(f"baseline training needs a labeled source, {source.name!r} is unlabeled")
    seed = _phase_seed(config, "baseline", 0)
    if M is None:
        M, _ = build_segmenter(config.segmentation_model, seed)
    max_it = config.iterations("baseline")
    opt_cfg = config.seg_optimizer
    sampler = BatchSampler(source, config.batch_size, seed, crop_size=config.crop_size, augment=config.augment)
    phase = _Phase(name, config, {"M": M}, {"M": config.segmentation_model},
                   {"M": opt_cfg.build(M.parameters())}, {"source": sampler}, max_it, run_dir, resume_from)
    opt = phase.optimizers["M"]
    M.train()
    ckpt = None
    for it in range(phase.start + 1, max_it + 1):
        phase.set_lr("M", opt_cfg, it - 1)
        x, y = sampler.next()
        loss = losses.seg_loss(M(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        phase.record(it, {"seg": value, "total": value})
        ckpt = phase.maybe_snapshot(it) or ckpt
    return PhaseResult(name, {"M": M}, phase.history, ckpt)


def train_translation(config: TrainConfig, source: DomainDataset, target: DomainDataset,
                      M_frozen: nn.Module | None = None, *, handles: ModelHandles | None = None,
                      run_dir=None, resume_from=None, rnd: int = 1, name: str | None = None) -> PhaseResult:
    """Alternating generator / discriminator updates of the translation networks.

    ``M_frozen`` guides the generators through the perceptual terms and is
    never modified.
    """
    w = config.weights
    if w.uses_perceptual and M_frozen is None:
        raise ValueError("a frozen segmenter is required when any perceptual weight is > 0")
    name = name or f"round{rnd}_translation"
    seed = _phase_seed(config, "translation", rnd)
    if handles is None:
        F, F_inv, D_T, D_S = build_translation(config.translation_model, seed)
        handles = ModelHandles(F, F_inv, D_T, D_S)
    handles.M = M_frozen
    m_digest = None if M_frozen is None else parameter_digest(M_frozen)
    nets = {"F": handles.F, "F_inv": handles.F_inv, "D_T": handles.D_T, "D_S": handles.D_S}
    opt_cfg = config.gan_optimizer
    optimizers = {"G": opt_cfg.build(_params(handles.F, handles.F_inv)),
                  "D": opt_cfg.build(_params(handles.D_T, handles.D_S))}
    kw = dict(crop_size=config.crop_size, augment=config.augment, with_labels=False)
    samplers = {"source": BatchSampler(source, config.batch_size, seed, **kw),
                "target": BatchSampler(target, config.batch_size, seed + 1, **kw)}
    max_it = config.iterations("translation")
    phase = _Phase(name, config, nets, dict.fromkeys(nets, config.translation_model),
                   optimizers, samplers, max_it, run_dir, resume_from)
    for m in nets.values():
        m.train()
    ckpt = None
    for it in range(phase.start + 1, max_it + 1):
        phase.set_lr("G", opt_cfg, it - 1)
        phase.set_lr("D", opt_cfg, it - 1)
        S, _ = samplers["source"].next()
        T, _ = samplers["target"].next()
        b = losses.total_F_loss(w, handles, S, T)
        optimizers["G"].zero_grad()
        b.total.backward()
        optimizers["G"].step()
        d_loss = losses.translation_discriminator_loss(w, handles, S, T, b.extras["S_t"].detach(),
                                                       b.extras["T_t"].detach())
        optimizers["D"].zero_grad()
        d_loss.backward()
        optimizers["D"].step()
        phase.record(it, {**b.values(), "total": float(b.total.detach()), "d_loss": float(d_loss.detach())})
        ckpt = phase.maybe_snapshot(it) or ckpt
    if m_digest is not None and parameter_digest(M_frozen) != m_digest:
        raise RuntimeError("frozen segmenter parameters changed during translation training")
    return PhaseResult(name, nets, phase.history, ckpt)


def train_segmenter_adapted(config: TrainConfig, translated_source: DomainDataset, target: DomainDataset,
                            *, M: nn.Module | None = None, D_out: nn.Module | None = None,
                            run_dir=None, resume_from=None, rnd: int = 1, name: str | None = None) -> PhaseResult:
    """Segmentation on translated source with output-space alignment to the target."""
    if not translated_source.labeled:
        raise DataError("translated source must carry the source labels")
    name = name or f"round{rnd}_adapted"
    seed = _phase_seed(config, "adapted", rnd)
    fresh_M, fresh_D = build_segmenter(config.segmentation_model, seed)
    M = fresh_M if M is None else M
    D_out = fresh_D if D_out is None else D_out
    seg_cfg, d_cfg = config.seg_optimizer, config.d_out_optimizer
    optimizers = {"M": seg_cfg.build(M.parameters()), "D_out": d_cfg.build(D_out.parameters())}
    samplers = {"source": BatchSampler(translated_source, config.batch_size, seed,
                                       crop_size=config.crop_size, augment=config.augment),
                "target": BatchSampler(target, config.batch_size, seed + 1, crop_size=config.crop_size,
                                       augment=config.augment, with_labels=False)}
    max_it = config.iterations("adapted")
    spec = config.segmentation_model
    phase = _Phase(name, config, {"M": M, "D_out": D_out}, {"M": spec, "D_out": spec},
                   optimizers, samplers, max_it, run_dir, resume_from)
    M.train()
    D_out.train()
    ckpt = None
    for it in range(phase.start + 1, max_it + 1):
        phase.set_lr("M", seg_cfg, it - 1)
        phase.set_lr("D_out", d_cfg, it - 1)
        xs, ys = samplers["source"].next()
        xt, _ = samplers["target"].next()
        logits_s, logits_t = M(xs), M(xt)
        b = losses.total_M_loss(config.weights, D_out, logits_s, ys, logits_t)
        optimizers["M"].zero_grad()
        b.total.backward()
        optimizers["M"].step()
        d_loss = losses.d_out_loss(D_out, logits_s, logits_t)
        optimizers["D_out"].zero_grad()
        d_loss.backward()
        optimizers["D_out"].step()
        phase.record(it, {**b.values(), "total": float(b.total.detach()), "d_loss": float(d_loss.detach())})
        ckpt = phase.maybe_snapshot(it) or ckpt
    return PhaseResult(name, {"M": M, "D_out": D_out}, phase.history, ckpt)


# --------------------------------------------------------------------------
# datasets through models


@torch.no_grad()
def translate_dataset(F: nn.Module, dataset: DomainDataset, *, batch_size: int = 16,
                      name: str | None = None) -> DomainDataset:
    """Run every tile image through ``F``; label planes are carried over unchanged."""
    was_training = F.training
    F.eval()
    tiles = []
    try:
        for i in range(0, len(dataset), batch_size):
            chunk = dataset.tiles[i:i + batch_size]
            out = to_uint8(F(to_tensor(np.stack([t.image for t in chunk]))))
            tiles += [TilePair(img, t.label, t.tile_id, t.domain_id) for img, t in zip(out, chunk)]
    finally:
        F.train(was_training)
    return DomainDataset(name or f"{dataset.name}_translated", tiles, dataset.tile_size,
                         dataset.split, dataset.labeled)


@torch.no_grad()
def predict_dataset(M: nn.Module, dataset: DomainDataset, *, batch_size: int = 16) -> np.ndarray:
    was_training = M.training
    M.eval()
    try:
        preds = [M(to_tensor(dataset.images()[i:i + batch_size])).argmax(1).to(torch.uint8).numpy()
                 for i in range(0, len(dataset), batch_size)]
    finally:
        M.train(was_training)
    return np.concatenate(preds)


def evaluate_segmenter(M: nn.Module, dataset: DomainDataset, *, batch_size: int = 16, **metadata) -> EvalReport:
    if not dataset.labeled:
        raise DataError(f"cannot evaluate on unlabeled dataset {dataset.name!r}")
    cm = ConfusionMatrix().accumulate(predict_dataset(M, dataset, batch_size=batch_size), dataset.labels())
    return EvalReport.from_confusion(cm, dataset=dataset.name, **metadata)


# --------------------------------------------------------------------------
# full schedule


@dataclass
class BDLResult:
    segmenters: list[nn.Module]
    translators: list[dict[str, nn.Module]]
    reports: list[EvalReport]
    history: list[dict]
    schedule: list[str]
    checkpoints: dict[str, Any] = field(default_factory=dict)


def run_bdl(config: TrainConfig, source: DomainDataset, target: DomainDataset,
            target_eval: DomainDataset | None = None, *, run_dir=None) -> BDLResult:
    """Baseline segmenter, then ``bdl_rounds`` of translation + adapted segmentation.

    If ``target_eval`` (or ``target`` itself) is labeled, each segmenter is
    evaluated on it; the labels are never used for training.
    """
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    eval_set = target_eval if target_eval is not None else (target if target.labeled else None)
    result = BDLResult([], [], [], [], [])

    def finish(phase: PhaseResult):
        result.history += phase.history
        result.schedule.append(phase.name)
        result.checkpoints[phase.name] = phase.checkpoint

    def report(M, rnd):
        if eval_set is not None:
            r = evaluate_segmenter(M, eval_set, name=f"round{rnd}", round=rnd)
            result.reports.append(r)
            logger.info("round %d target MIoU %.2f", rnd, r.miou)

    base = train_segmenter_baseline(config, source, run_dir=run_dir)
    finish(base)
    M = base["M"]
    result.segmenters.append(M)
    report(M, 0)
    for rnd in range(1, config.bdl_rounds + 1):
        trans = train_translation(config, source, target, M, run_dir=run_dir, rnd=rnd)
        finish(trans)
        result.translators.append(trans.models)
        translated = translate_dataset(trans["F"], source)
        init = copy.deepcopy(M) if config.seg_init == "continue" else None
        adapted = train_segmenter_adapted(config, translated, target, M=init, run_dir=run_dir, rnd=rnd)
        finish(adapted)
        M = adapted["M"]
        result.segmenters.append(M)
        report(M, rnd)
    if run_dir is not None and result.reports:
        (Path(run_dir) / "reports.json").write_text(json.dumps([r.to_dict() for r in result.reports], indent=1))
    return result
