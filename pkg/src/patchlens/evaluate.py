"""Score aggregation, AUROC metrics and the contamination-sweep harness.

AUROC uses the Mann-Whitney rank statistic with tie-splitting, which matches
pairwise counting exactly (no threshold sweep). Image scores are the top-k
mean of the Gaussian-smoothed probability heatmap; pixel scores reuse the
same smoothed maps at full image resolution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .data import Sample
from .errors import ContractError
from .imagefiles import write_pgm
from .rng import derived_rng
from .synthesis import contaminate
from .tensor_ops import Tensor4, bilinear_resize

PIXEL_SUBSAMPLE_LIMIT = 1 << 22


@dataclass(frozen=True)
class Metrics:
    image_auroc: float
    pixel_auroc: float | None
    n_images: int
    n_anomalous: int
    per_category: dict[str, float] = field(default_factory=dict)
    notes: str = "pixel scores computed at full image resolution"


@dataclass(frozen=True)
class EvalConfig:
    smooth_sigma: float = 4.0
    top_k: int = 1
    pixel_limit: int = PIXEL_SUBSAMPLE_LIMIT
    seed: int = 0


@dataclass(frozen=True)
class SweepResult:
    rates: tuple[float, ...]
    metrics: tuple[Metrics, ...]
    seed: int


def auroc(scores, labels) -> float:
    """Area under the ROC curve via rank statistics.

    Ties between classes contribute half a win each, so the value equals the
    brute-force pairwise count (sum over anomalous/normal pairs) exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores/labels must be equal-length vectors, got "
                            f"{s.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    pos = int(np.sum(y == 1))
    neg = int(np.sum(y == 0))
    if pos == 0 or neg == 0:
        raise ContractError(
            f"AUROC needs both classes; got {pos} anomalous and {neg} normal"
        )
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    u = float(ranks[y == 1].sum()) - pos * (pos + 1) / 2.0
    return u / (pos * neg)


def _smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing with a 4-sigma truncated kernel, per 2-D map."""
    if sigma <= 0.0:
        return arr
    return ndimage.gaussian_filter(arr, sigma=sigma, truncate=4.0, mode="reflect")


def image_score(heatmap: Tensor4, smooth_sigma: float, top_k: int) -> float:
    """Gaussian-smooth, then mean of the top_k positions (top_k=1 is the max)."""
    if heatmap.n != 1 or heatmap.c != 1:
        raise ContractError(f"image_score expects a (1,1,G,G) heatmap, got {heatmap.shape}")
    total = heatmap.h * heatmap.w
    if not 1 <= top_k <= total:
        raise ContractError(f"top_k {top_k} outside [1, {total}]")
    smoothed = _smooth(heatmap.values[0, 0], smooth_sigma)
    flat = smoothed.ravel()
    if top_k == 1:
        return float(flat.max())
    top = np.partition(flat, len(flat) - top_k)[len(flat) - top_k:]
    return float(top.mean())


def upsample_heatmap(heatmap: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Bilinear upsampling to full image resolution."""
    return bilinear_resize(heatmap, out_h, out_w)


def _resize_mask_nearest(mask: Tensor4, size: int) -> np.ndarray:
    h, w = mask.h, mask.w
    ys = np.clip(((np.arange(size) + 0.5) * h / size).astype(np.int64), 0, h - 1)
    xs = np.clip(((np.arange(size) + 0.5) * w / size).astype(np.int64), 0, w - 1)
    return mask.values[0, 0][np.ix_(ys, xs)]


def _score_maps(model, sample: Sample, cfg: EvalConfig) -> tuple[float, np.ndarray]:
    """(image score, smoothed full-resolution probability map) for one sample."""
    size = model.input_size
    img = bilinear_resize(sample.image, size, size)
    logits = model.heatmaps(img)
    probs = Tensor4._wrap(expit(logits.values))
    up = upsample_heatmap(probs, size, size)
    smoothed = _smooth(up.values[0, 0], cfg.smooth_sigma)
    total = smoothed.size
    k = min(cfg.top_k, total)
    if k == 1:
        score = float(smoothed.max())
    else:
        score = float(np.partition(smoothed.ravel(), total - k)[total - k:].mean())
    return score, smoothed


def evaluate(model, test_set: list[Sample], cfg: EvalConfig = EvalConfig()) -> Metrics:
    """Score every sample with the model and compute image/pixel AUROC.

    The model exposes ``input_size`` and ``heatmaps(image01) -> logits``;
    pixel AUROC is reported only when ground-truth masks exist, subsampling
    at most cfg.pixel_limit pixels (seeded) to bound memory.
    """
    if not test_set:
        raise ContractError("evaluation set is empty")
    scores, labels, categories = [], [], []
    pixel_scores, pixel_labels = [], []
    have_masks = False
    for s in test_set:
        score, smoothed = _score_maps(model, s, cfg)
        scores.append(score)
        labels.append(1 if s.label == "anomalous" else 0)
        categories.append(s.category)
        if s.label == "anomalous" and s.mask is not None:
            have_masks = True
            pixel_scores.append(smoothed.ravel())
            pixel_labels.append(_resize_mask_nearest(s.mask, model.input_size).ravel())
        elif s.label == "normal":
            pixel_scores.append(smoothed.ravel())
            pixel_labels.append(np.zeros(smoothed.size))

    image_auroc = auroc(scores, labels)

    pixel_auroc = None
    if have_masks:
        ps = np.concatenate(pixel_scores)
        pl = np.concatenate(pixel_labels)
        if ps.size > cfg.pixel_limit:
            pick = derived_rng(cfg.seed, "pixel-subsample").choice(
                ps.size, size=cfg.pixel_limit, replace=False)
            ps, pl = ps[pick], pl[pick]
        if len(np.unique(pl)) == 2:
            pixel_auroc = auroc(ps, pl.astype(np.int64))

    per_category: dict[str, float] = {}
    for cat in sorted(set(categories)):
        cat_scores = [sc for sc, c in zip(scores, categories) if c == cat]
        cat_labels = [lb for lb, c in zip(labels, categories) if c == cat]
        if len(set(cat_labels)) == 2 and len(set(categories)) > 1:
            per_category[cat] = auroc(cat_scores, cat_labels)

    return Metrics(image_auroc=image_auroc, pixel_auroc=pixel_auroc,
                   n_images=len(test_set), n_anomalous=int(np.sum(labels)),
                   per_category=per_category)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """rows carry run_id, rate, split, metrics, seed; floats fixed to 6 digits."""
    fields = ["run_id", "rate", "split", "image_auroc", "pixel_auroc",
              "n_images", "n_anomalous", "seed"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("rate", "image_auroc", "pixel_auroc"):
                if out.get(key) is not None and out[key] != "":
                    out[key] = f"{float(out[key]):.6f}"
                else:
                    out[key] = ""
            writer.writerow(out)


def metrics_row(metrics: Metrics, run_id: str, rate: float, split: str,
                seed: int) -> dict:
    return {
        "run_id": run_id, "rate": rate, "split": split,
        "image_auroc": metrics.image_auroc,
        "pixel_auroc": metrics.pixel_auroc if metrics.pixel_auroc is not None else "",
        "n_images": metrics.n_images, "n_anomalous": metrics.n_anomalous,
        "seed": seed,
    }


def export_heatmaps(model, samples: list[Sample], out_dir: str | Path,
                    cfg: EvalConfig = EvalConfig()) -> list[Path]:
    """Write one 8-bit PGM per sample (min-max scaled) plus a sidecar text
    file recording the scale so scores can be reconstructed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        _, smoothed = _score_maps(model, s, cfg)
        lo, hi = float(smoothed.min()), float(smoothed.max())
        span = hi - lo if hi > lo else 1.0
        scaled = np.round((smoothed - lo) / span * 255.0).astype(np.uint8)
        pgm = out_dir / f"heatmap_{i:04d}.pgm"
        write_pgm(pgm, scaled)
        sidecar = out_dir / f"heatmap_{i:04d}.txt"
        sidecar.write_text(
            f"source={s.source}\nlabel={s.label}\nmin={lo:.9g}\nmax={hi:.9g}\n")
        written.append(pgm)
    return written


def contamination_sweep(train: list[Sample], val: list[Sample], test: list[Sample],
                        pool: list[Sample], rates, seed: int,
                        train_fn, eval_fn, csv_path: str | Path | None = None
                        ) -> SweepResult:
    """Contaminate, retrain from identical initialization, evaluate per rate.

    train_fn(train_samples, seed) -> model; eval_fn(model, test) -> Metrics.
    The rate-0 entry is bit-identical to a plain train+evaluate run because
    contamination at rate 0 returns the training list unchanged and all seeds
    derive from the same root.
    """
    rates = tuple(sorted(float(r) for r in rates))
    for r in rates:
        if not 0.0 <= r <= 0.3:
            raise ContractError(f"sweep rate {r} outside [0, 0.3]")
    results = []
    rows = []
    for rate in rates:
        contaminated = contaminate(train, pool, rate, seed)
        model = train_fn(contaminated, seed)
        metrics = eval_fn(model, test)
        results.append(metrics)
        rows.append(metrics_row(metrics, run_id=f"sweep-{rate:g}", rate=rate,
                                split="test", seed=seed))
    if csv_path is not None:
        write_metrics_csv(csv_path, rows)
    return SweepResult(rates=rates, metrics=tuple(results), seed=seed)
