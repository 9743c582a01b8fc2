"""Acceptance criteria 1-8.

Each test appends one ``C<n> PASS|FAIL`` line that pytest prints in its
terminal summary.  Criterion 7 trains real (tiny) networks for several
minutes per seed; deselect it with ``-m "not slow"`` for a quick pass.

Criterion 7 settings were fixed after a pilot sweep on the same generator
(seeds 0-2, 200 tiles per domain, 32 px tiles); see ``BENCHMARK`` below.
"""

import copy
import statistics
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from reference_tables import BDL_V2, KNOWN_DISCREPANT, NO_ADAPTATION_V2, printed_tolerance
from lulc_adapt.data import (DomainDataset, RasterScene, TilePair, quantize_to_8bit, read_dataset,
                             remap_clc_labels, rotate_crop, tile_raster, write_dataset)
from lulc_adapt.evaluation import ConfusionMatrix, iou_per_class, miou
from lulc_adapt.losses import (LossWeights, adv_out_loss, d_out_loss, gan_loss, perceptual_loss, recon_loss,
                               seg_loss, total_F_loss, total_F_loss_shared)
from lulc_adapt.models import (ModelHandles, SegmentationModelSpec, TranslationModelSpec, build_segmenter,
                               build_translation, parameter_digest)
from lulc_adapt.schema import CLC_LEVEL3_CODES, CLC_NODATA_CODES, SATELLITES
from lulc_adapt.synthetic import generate_synthetic_domains
from lulc_adapt.trainer import (run_bdl, synthetic_config, train_segmenter_adapted, train_segmenter_baseline,
                                train_translation, translate_dataset)


def report(n: int, passed: bool, detail: str):
    line = f"C{n} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def unlabeled(ds: DomainDataset) -> DomainDataset:
    return DomainDataset(ds.name, [TilePair(t.image, None, t.tile_id, t.domain_id) for t in ds.tiles],
                         ds.tile_size, ds.split, False)


# --------------------------------------------------------------------------
# 1. MIoU against a brute-force oracle


def brute_force_counts(pred, gt, n=7):
    """Per-class intersection and union counted pixel by pixel."""
    inter, union = [0] * n, [0] * n
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == g:
            inter[p] += 1
            union[p] += 1
        else:
            union[p] += 1
            union[g] += 1
    return inter, union


def test_c1_miou_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    preds = rng.integers(0, 7, (200, 16, 16))
    gts = np.where(rng.random((200, 16, 16)) < 0.6, preds, rng.integers(0, 7, (200, 16, 16)))
    ok = True
    cm_all = ConfusionMatrix()
    for p, g in zip(preds, gts):
        cm = ConfusionMatrix().accumulate(p, g)
        cm_all = cm_all.accumulate(p, g)
        inter, union = brute_force_counts(p, g)
        tp = np.diag(cm.counts)
        ok &= tp.tolist() == inter
        ok &= (cm.counts.sum(0) + cm.counts.sum(1) - tp).tolist() == union
        oracle = [i / u if u else 0.0 for i, u in zip(inter, union)]
        ok &= np.allclose(iou_per_class(cm), oracle, rtol=0, atol=1e-12)
        ok &= abs(miou(cm) - sum(oracle) / 7) <= 1e-12
    inter, union = brute_force_counts(preds, gts)
    pooled = [i / u if u else 0.0 for i, u in zip(inter, union)]
    ok &= np.allclose(iou_per_class(cm_all), pooled, rtol=0, atol=1e-12)
    elapsed = time.perf_counter() - t0
    report(1, bool(ok) and elapsed < 10, f"200 random 16x16 pairs match the oracle exactly ({elapsed:.2f} s)")
    assert ok and elapsed < 10


# --------------------------------------------------------------------------
# 2. Published table consistency


def test_c2_table_consistency():
    t0 = time.perf_counter()
    worst = 0.0
    ok = True
    for pair, row in NO_ADAPTATION_V2.items():
        gap = abs(sum(row[:7]) / 7 - row[7])
        worst = max(worst, gap)
        ok &= gap <= printed_tolerance(row[7])
    wv2 = NO_ADAPTATION_V2["WV2 to DG"]
    ok &= round(sum(wv2[:7]) / 7, 2) == 8.31
    row = BDL_V2["WV2 to DG"]
    computed = sum(row[:7]) / 7
    ok &= ("BDL_V2", "WV2 to DG") in KNOWN_DISCREPANT
    ok &= round(computed, 2) == 30.62 and row[7] == 29.76
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1
    report(2, ok, f"no-adaptation rows consistent (largest gap {worst:.3f} at printed precision); "
                  f"BDL WV2 to DG documented as discrepant ({computed:.2f} vs {row[7]})")
    assert ok


# --------------------------------------------------------------------------
# 3. Split perceptual weights reduce to the single-weight form


def test_c3_reduction_identity():
    t0 = time.perf_counter()
    F, F_inv, D_T, D_S = build_translation(TranslationModelSpec.preset("tiny"), 0)
    M, _ = build_segmenter(SegmentationModelSpec.preset("tiny"), 1)
    h = ModelHandles(F, F_inv, D_T, D_S, M)
    g = torch.Generator().manual_seed(0)
    S = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    T = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    worst = 0.0
    with torch.no_grad():
        for lam in (0.0, 0.1, 0.5, 2.0):
            w = LossWeights(lambda_D=1.0, lambda_per=lam, lambda_perA=lam, lambda_perB=lam, lambda_per_recon=0.3)
            split, shared = total_F_loss(w, h, S, T), total_F_loss_shared(w, h, S, T)
            for name in ("gan", "recon"):
                a, b = split.terms[name].item(), shared.terms[name].item()
                worst = max(worst, abs(a - b) / max(abs(b), 1e-12))
            per_split = sum(split.coefficients[k] * split.terms[k].item() for k in ("perA", "perB", "per_recon"))
            worst = max(worst, abs(per_split - shared.terms["per"].item()) / max(shared.terms["per"].item(), 1e-12))
            a, b = split.total.item(), shared.total.item()
            worst = max(worst, abs(a - b) / abs(b))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    report(3, ok, f"largest relative difference {worst:.2e} over 4 weight settings ({elapsed:.1f} s)")
    assert ok


# --------------------------------------------------------------------------
# 4. Finite-difference gradient checks for every loss term


def _fd_agreement(loss_fn, module, n_samples, rng, eps=1e-6):
    params = [p for p in module.parameters()]
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    module.zero_grad()
    loss_fn().backward()
    good = nontrivial = 0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[k], int(flat - offsets[k])
        analytic = p.grad.view(-1)[i].item() if p.grad is not None else 0.0
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + eps
            up = loss_fn().item()
            p.view(-1)[i] = orig - eps
            down = loss_fn().item()
            p.view(-1)[i] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        good += abs(analytic - numeric) <= 1e-3 * scale or scale < 1e-9
        nontrivial += scale >= 1e-9
    return good / len(picks), nontrivial


def test_c4_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    tspec = TranslationModelSpec(residual_blocks=1, discriminator_layers=2, base_width=8)
    sspec = SegmentationModelSpec(variant="v2_like", backbone_depth="tiny", base_width=8, discriminator_width=8)
    F, F_inv, D_T, D_S = (m.double() for m in build_translation(tspec, 0))
    M, D_out = (m.double() for m in build_segmenter(sspec, 1))
    g = torch.Generator().manual_seed(1)
    S = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    T = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    labels = torch.randint(0, 7, (2, 16, 16), generator=g)
    h = ModelHandles(F, F_inv, D_T, D_S, M, D_out)
    # the frozen segmenter used by the perceptual terms
    M_frozen = copy.deepcopy(M)
    h_frozen = ModelHandles(F, F_inv, D_T, D_S, M_frozen)

    terms = {
        "seg": (lambda: seg_loss(M(S), labels), M),
        "adv": (lambda: adv_out_loss(D_out, M(T)), M),
        "d_out": (lambda: d_out_loss(D_out, M(S), M(T)), D_out),
        "gan_generator": (lambda: gan_loss(D_T, T, F(S), "generator", 1.5), F),
        "gan_discriminator": (lambda: gan_loss(D_T, T, F(S), "discriminator", 1.5), D_T),
        "recon": (lambda: recon_loss(S, F_inv(F(S))), F_inv),
        "perA": (lambda: perceptual_loss(M_frozen, S, F(S)), F),
        "perB": (lambda: perceptual_loss(M_frozen, T, F_inv(T)), F_inv),
        "per_recon": (lambda: total_F_loss(LossWeights(), h_frozen, S, T).terms["per_recon"], F),
    }
    rng = np.random.default_rng(0)
    results = {name: _fd_agreement(fn, module, 40, rng) for name, (fn, module) in terms.items()}
    rates = {k: r for k, (r, _) in results.items()}
    nonzero = min(n for _, n in results.values())
    elapsed = time.perf_counter() - t0
    worst = min(rates, key=rates.get)
    # a check on all-zero gradients would prove nothing
    ok = all(r >= 0.95 for r in rates.values()) and nonzero >= 20 and elapsed < 300
    report(4, ok, f"{len(rates)} loss terms, 40 parameters each (at least {nonzero} with non-zero gradient); "
                  f"lowest agreement {rates[worst]:.0%} ({worst}); {elapsed:.0f} s")
    assert ok, results


# --------------------------------------------------------------------------
# 5. Stop-gradient and phase isolation


def test_c5_isolation():
    t0 = time.perf_counter()
    src, tgt = generate_synthetic_domains(3, 6, tile_size=16)
    tgt = unlabeled(tgt)
    cfg = synthetic_config(total_iterations=3, batch_size=2)
    checks = {}

    F, F_inv, D_T, D_S = build_translation(cfg.translation_model, 0)
    M, D_out = build_segmenter(cfg.segmentation_model, 1)
    b = total_F_loss(LossWeights(lambda_GAN=0, lambda_recon=0), ModelHandles(F, F_inv, D_T, D_S, M),
                     torch.rand(2, 3, 16, 16) * 2 - 1, torch.rand(2, 3, 16, 16) * 2 - 1)
    b.total.backward()
    checks["perceptual gives M no gradient"] = all(p.grad is None or not p.grad.any() for p in M.parameters())
    checks["perceptual reaches F"] = any(p.grad is not None and p.grad.any() for p in F.parameters())

    base = train_segmenter_baseline(cfg, src)
    m_hash = parameter_digest(base["M"])
    trans = train_translation(cfg, src, tgt, base["M"])
    checks["translation leaves M"] = parameter_digest(base["M"]) == m_hash
    frozen = {k: parameter_digest(m) for k, m in trans.models.items()}
    translated = translate_dataset(trans["F"], src)
    checks["translate_dataset leaves F"] = parameter_digest(trans["F"]) == frozen["F"]
    M0 = copy.deepcopy(base["M"])
    train_segmenter_adapted(cfg, translated, tgt, M=M0)
    checks["adapted phase leaves translators"] = {k: parameter_digest(m) for k, m in trans.models.items()} == frozen
    checks["adapted phase leaves baseline M"] = parameter_digest(base["M"]) == m_hash
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 120
    failed = [k for k, v in checks.items() if not v]
    report(5, ok, f"{len(checks)} contracts hold ({elapsed:.1f} s)" if ok else f"failed: {failed}")
    assert ok, failed


# --------------------------------------------------------------------------
# 6. Data pipeline properties


def test_c6_data_pipeline(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    checks = {}
    bands = list(SATELLITES["sentinel2"].bands[:3])

    monotone = True
    for _ in range(1000):
        n = int(rng.integers(2, 64))
        values = rng.integers(0, 4096, n).astype(np.uint16)
        if values.min() == values.max():
            values[0] = (values[0] + 1) % 4096
        px = np.repeat(values[:, None, None], 3, axis=2).reshape(n, 1, 3)
        lo = float(rng.uniform(0, 0.3))
        out = quantize_to_8bit(RasterScene(px, 12, bands), (lo, float(rng.uniform(0.7, 1.0)))).pixels[:, 0, 0]
        order = np.argsort(values, kind="stable")
        monotone &= bool(np.all(np.diff(out[order].astype(int)) >= 0))
    checks["quantization monotone on 1000 bands"] = monotone

    all_codes = np.array(list(CLC_LEVEL3_CODES) + list(CLC_NODATA_CODES))
    codes, n_unlisted = remap_clc_labels(all_codes)
    checks["remap total over CLC codes"] = n_unlisted == 0 and codes.max() <= 6 and len(codes) == len(all_codes)

    partition = True
    for h, w, ts in [(64, 64, 16), (70, 50, 16), (37, 91, 9), (224, 448, 224)]:
        px = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        lab = rng.integers(0, 7, (h, w), dtype=np.uint8)
        tiles = tile_raster(RasterScene(px, 8, bands), lab, ts)
        partition &= len(tiles) == (h // ts) * (w // ts)
        covered = np.zeros((h, w), dtype=int)
        for t in tiles:
            r, c = (int(v) for v in t.tile_id.replace("r", "").split("_c"))
            covered[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts] += 1
            partition &= np.array_equal(t.image, px[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts])
            partition &= np.array_equal(t.label, lab[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts])
        partition &= covered.max() == 1 and covered.sum() == len(tiles) * ts * ts
    checks["tiling partition exact"] = bool(partition)

    aligned = True
    base = np.arange(64).reshape(8, 8)
    image = np.stack([base, base + 64, base + 128], axis=-1).astype(np.uint8)
    label = (base % 7).astype(np.uint8)
    for k in range(4):
        for size in range(1, 9):
            for top in range(9 - size):
                for left in range(9 - size):
                    img2, lab2 = rotate_crop(image, label, k, top, left, size)
                    # each output pixel's first channel identifies its source pixel
                    src_idx = img2[..., 0].astype(int)
                    aligned &= np.array_equal(lab2, (src_idx % 7).astype(np.uint8))
                    aligned &= np.array_equal(img2[..., 1].astype(int), src_idx + 64)
    checks["augmentation aligned (8x8 exhaustive)"] = bool(aligned)

    src, _ = generate_synthetic_domains(6, 5, tile_size=16)
    write_dataset(src, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    checks["dataset round trip bit-exact"] = (back.name == src.name and back.tile_size == src.tile_size
                                              and all(a == b for a, b in zip(src.tiles, back.tiles))
                                              and len(back) == len(src))
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 120
    failed = [k for k, v in checks.items() if not v]
    report(6, ok, f"{len(checks)} properties hold ({elapsed:.1f} s)" if ok else f"failed: {failed}")
    assert ok, failed


# --------------------------------------------------------------------------
# 7-8. Synthetic end-to-end adaptation and determinism

# Pinned after the pilot sweep.  Per-seed gains there: see the decisions log.
BENCHMARK = dict(
    seeds=(0, 1, 2),
    n_tiles=200,           # per domain, training
    n_eval_tiles=200,      # held-out labeled target tiles (seed + 1000)
    tile_size=32,
    shift="satellite",
    min_median_gain=10.0,  # percentage points of target MIoU
    config=dict(total_iterations=600, translation_iterations=1500, bdl_rounds=1),
)


def _benchmark_run(seed, run_dir):
    b = BENCHMARK
    src, tgt = generate_synthetic_domains(seed, b["n_tiles"], b["tile_size"], b["shift"])
    _, tgt_eval = generate_synthetic_domains(seed + 1000, b["n_eval_tiles"], b["tile_size"], b["shift"],
                                             split="test")
    cfg = synthetic_config(seed=seed, **b["config"])
    assert max(cfg.iterations(p) for p in ("baseline", "translation", "adapted")) <= 2000
    res = run_bdl(cfg, src, unlabeled(tgt), tgt_eval, run_dir=run_dir)
    return res.reports[0].miou, res.reports[-1].miou, (run_dir / "loss_log.jsonl").read_text()


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    runs = {s: _benchmark_run(s, root / f"seed{s}") for s in BENCHMARK["seeds"]}
    return runs, time.perf_counter() - t0, root


@pytest.mark.slow
def test_c7_synthetic_adaptation(benchmark_runs):
    runs, elapsed, _ = benchmark_runs
    gains = {s: adapted - base for s, (base, adapted, _) in runs.items()}
    median = statistics.median(gains.values())
    detail = ", ".join(f"seed {s}: {runs[s][0]:.1f} -> {runs[s][1]:.1f}" for s in runs)
    ok = median >= BENCHMARK["min_median_gain"] and elapsed <= 2 * 3600
    report(7, ok, f"median target MIoU gain {median:+.1f} pp ({detail}; {elapsed / 60:.0f} min)")
    assert ok, gains


@pytest.mark.slow
def test_c8_determinism(benchmark_runs):
    runs, _, root = benchmark_runs
    seed = BENCHMARK["seeds"][0]
    base, adapted, log = _benchmark_run(seed, root / "repeat")
    same_log = log == runs[seed][2]
    same_miou = (base, adapted) == runs[seed][:2]
    n_lines = len(log.splitlines())
    ok = same_log and same_miou
    report(8, ok, f"repeat of seed {seed}: {n_lines} loss-log lines identical={same_log}, "
                  f"final MIoU equal={same_miou}")
    assert ok
