"""Salient-object-detection metrics: MAE, F-measures, S-measure, E-measure.

Predictions are float maps in [0,1]; ground truths are {0,1} maps.  All
per-image kernels are pure functions of two 2-D arrays.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .data import list_images, read_gray
from .tensor import resize_array

log = logging.getLogger(__name__)

BETA2 = 0.3
N_THRESHOLDS = 256
_EPS = np.spacing(1.0)
_THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


class EmptyGroundTruthWarning(UserWarning):
    pass


def _check(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {t.shape} differ")
    return p, t.astype(bool)


def as_saliency(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 1:
        raise ValueError("saliency map must be 2-D with values in [0,1]")
    return arr


def as_ground_truth(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2 or not np.isin(arr, (0, 1)).all():
        raise ValueError("ground truth must be a 2-D {0,1} map")
    return arr.astype(bool)


def mae(p: np.ndarray, t: np.ndarray) -> float:
    p, t = _check(p, t)
    return float(np.abs(p - t).mean())


def _pr_from_counts(tp, fp, fn):
    """Precision/recall with the empty-set conventions: nothing predicted -> P=0 unless GT is empty too."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    pos, gt = tp + fp, tp + fn
    precision = np.where(pos > 0, tp / np.maximum(pos, 1), np.where(gt > 0, 0.0, 1.0))
    recall = np.where(gt > 0, tp / np.maximum(gt, 1), 1.0)
    return precision, recall


def pr_at_threshold(p: np.ndarray, t: np.ndarray, thr: int) -> tuple[float, float]:
    """Precision/recall after binarizing ``p > thr/255``."""
    p, t = _check(p, t)
    if not 0 <= thr <= 255:
        raise ValueError("threshold must be in 0..255")
    b = p > thr / 255.0
    tp = np.count_nonzero(b & t)
    fp = np.count_nonzero(b & ~t)
    fn = np.count_nonzero(~b & t)
    precision, recall = _pr_from_counts(tp, fp, fn)
    return float(precision), float(recall)


def pr_curve(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at all 256 thresholds via cumulative histograms."""
    p, t = _check(p, t)
    # number of thresholds k/255 strictly below each value: p > k/255  <=>  k < above[...]
    above = np.searchsorted(_THRESHOLDS, p, side="left")
    fg = np.bincount(above[t], minlength=N_THRESHOLDS + 1)
    bg = np.bincount(above[~t], minlength=N_THRESHOLDS + 1)
    tp = np.cumsum(fg[::-1])[::-1][1:]
    fp = np.cumsum(bg[::-1])[::-1][1:]
    fn = np.count_nonzero(t) - tp
    return _pr_from_counts(tp, fp, fn)


def f_beta(precision, recall, beta2: float = BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    den = beta2 * precision + recall
    out = np.where(den > 0, (1 + beta2) * precision * recall / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def adaptive_f_measure(p: np.ndarray, t: np.ndarray) -> float:
    """F-measure at the per-image threshold min(1, 2*mean(p)), binarizing with ``>=``."""
    p, t = _check(p, t)
    thr = min(1.0, 2.0 * float(p.mean()))
    b = p >= thr
    tp = np.count_nonzero(b & t)
    fp = np.count_nonzero(b & ~t)
    fn = np.count_nonzero(~b & t)
    precision, recall = _pr_from_counts(tp, fp, fn)
    return f_beta(precision, recall)


def f_measure_curve(pairs: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Dataset curves (precision, recall, F at thresholds 0..255) and mean adaptive F."""
    if not pairs:
        raise ValueError("empty dataset")
    ps, rs = zip(*(pr_curve(p, t) for p, t in pairs))
    precision = np.mean(ps, axis=0)
    recall = np.mean(rs, axis=0)
    mean_f = float(np.mean([adaptive_f_measure(p, t) for p, t in pairs]))
    return precision, recall, f_beta(precision, recall), mean_f


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(xx * xx + yy * yy) / (2 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Euclidean distance to, and coordinates of, the nearest foreground pixel.

    Equidistant candidates resolve to the lowest row-major index so the result
    does not depend on the distance-transform implementation.
    """
    t = np.asarray(t, dtype=bool)
    dist = ndimage.distance_transform_edt(~t)
    h, w = t.shape
    iy, ix = np.indices((h, w))
    ny, nx = iy.copy(), ix.copy()
    d2 = np.rint(dist * dist).astype(np.int64)
    bg = ~t
    for val in np.unique(d2[bg]):
        sel = bg & (d2 == val)
        ys, xs = np.nonzero(sel)
        todo = np.ones(ys.size, dtype=bool)
        r = int(math.isqrt(int(val)))
        for dy in range(-r, r + 1):
            rem = int(val) - dy * dy
            dx = int(math.isqrt(rem))
            if dx * dx != rem:
                continue
            for ddx in sorted({-dx, dx}):
                yy, xx = ys + dy, xs + ddx
                ok = todo & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                ok[ok] = t[yy[ok], xx[ok]]
                ny[sel] = np.where(ok, yy, ny[sel])
                nx[sel] = np.where(ok, xx, nx[sel])
                todo &= ~ok
    return dist, ny, nx


def weighted_f_measure(p: np.ndarray, t: np.ndarray, beta2: float = BETA2) -> float:
    """Spatially weighted F-measure with dependency smoothing and distance-based importance."""
    p, t = _check(p, t)
    if not t.any():
        warnings.warn("weighted F-measure is undefined for empty ground truth; returning 0",
                      EmptyGroundTruthWarning, stacklevel=2)
        return 0.0
    err = np.abs(p - t)
    dist, ny, nx = nearest_foreground(t)
    spread = err[ny, nx]  # background pixels borrow the error of their nearest foreground pixel
    smoothed = ndimage.correlate(spread, _gaussian_kernel(), mode="constant", cval=0.0)
    dep = np.where(t & (smoothed < err), smoothed, err)
    importance = np.where(t, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = dep * importance
    tp_w = t.sum() - ew[t].sum()
    fp_w = ew[~t].sum()
    recall = 1.0 - ew[t].mean()
    precision = tp_w / (tp_w + fp_w + _EPS)
    q = (1 + beta2) * recall * precision / (recall + beta2 * precision + _EPS)
    return float(np.clip(q, 0.0, 1.0))


def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + _EPS)


def _ssim(p: np.ndarray, t: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    mx, my = p.mean(), t.mean()
    denom = max(n - 1, 1)
    sx = ((p - mx) ** 2).sum() / denom
    sy = ((t - my) ** 2).sum() / denom
    sxy = ((p - mx) * (t - my)).sum() / denom
    alpha = 4 * mx * my * sxy
    beta = (mx * mx + my * my) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(p: np.ndarray, t: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: object-aware and region-aware similarity mixed at ``alpha``."""
    p, t = _check(p, t)
    fg_ratio = t.mean()
    if fg_ratio == 0:
        return float(1.0 - p.mean())
    if fg_ratio == 1:
        return float(p.mean())
    tf = t.astype(np.float64)

    # object-aware
    s_fg = _object_score(p[t])
    s_bg = _object_score(1.0 - p[~t])
    s_obj = fg_ratio * s_fg + (1 - fg_ratio) * s_bg

    # region-aware: split at the (1-based, rounded) foreground centroid
    h, w = t.shape
    cy, cx = np.argwhere(t).mean(axis=0).round()
    x, y = int(cx) + 1, int(cy) + 1
    area = h * w
    weights = (x * y / area, (w - x) * y / area, x * (h - y) / area)
    weights = weights + (1 - sum(weights),)
    blocks = ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
              (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w)))
    s_reg = sum(wt * _ssim(p[b], tf[b]) for wt, b in zip(weights, blocks))

    return float(np.clip(alpha * s_obj + (1 - alpha) * s_reg, 0.0, 1.0))


def _enhanced_alignment(b: np.ndarray, t: np.ndarray) -> float:
    """Mean enhanced alignment between a binary prediction and the ground truth."""
    if not t.any():
        return float((~b).mean())
    if t.all():
        return float(b.mean())
    bf, tf = b.astype(np.float64), t.astype(np.float64)
    pb, pt = bf - bf.mean(), tf - tf.mean()
    num = 2.0 * pb * pt
    den = pb * pb + pt * pt
    align = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(((1.0 + align) ** 2 / 4.0).mean())


def e_measure_curve(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Enhanced alignment of ``p > k/256`` for k = 0..255.

    The k/256 grid never yields the all-on or all-off map for 8-bit inputs,
    so a binary prediction binarizes to itself at every threshold.
    """
    p, t = _check(p, t)
    return np.array([_enhanced_alignment(p > k / 256.0, t) for k in range(N_THRESHOLDS)])


def e_measure_mean(p: np.ndarray, t: np.ndarray) -> float:
    return float(e_measure_curve(p, t).mean())


# ----------------------------------------------------------------------------- dataset level


@dataclass
class ImageMetrics:
    name: str
    mae: float
    f_adaptive: float
    f_weighted: float
    s_measure: float
    e_measure: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)


@dataclass
class MetricReport:
    mae: float
    f_mean: float
    f_weighted: float
    s_measure: float
    e_measure: float
    f_curve: list[float]
    precision_curve: list[float]
    recall_curve: list[float]
    n_images: int
    missing: list[str] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("mae", "f_mean", "f_weighted", "s_measure", "e_measure")}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def curves_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f"])
            for k in range(N_THRESHOLDS):
                writer.writerow([k, repr(self.precision_curve[k]), repr(self.recall_curve[k]),
                                 repr(self.f_curve[k])])


def evaluate_image(name: str, p: np.ndarray, t: np.ndarray) -> ImageMetrics:
    p, t = _check(p, t)
    precision, recall = pr_curve(p, t)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroundTruthWarning)
        wf = weighted_f_measure(p, t)
    return ImageMetrics(name, mae(p, t), adaptive_f_measure(p, t), wf, s_measure(p, t),
                        e_measure_mean(p, t), precision, recall)


def aggregate(results: Iterable[ImageMetrics], missing: Sequence[str] = ()) -> MetricReport:
    results = sorted(results, key=lambda r: r.name)
    if not results:
        raise ValueError("no valid prediction/ground-truth pairs")
    precision = np.mean([r.precision for r in results], axis=0)
    recall = np.mean([r.recall for r in results], axis=0)
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in results]))  # noqa: E731
    return MetricReport(
        mae=mean("mae"), f_mean=mean("f_adaptive"), f_weighted=mean("f_weighted"),
        s_measure=mean("s_measure"), e_measure=mean("e_measure"),
        f_curve=f_beta(precision, recall).tolist(),
        precision_curve=precision.tolist(), recall_curve=recall.tolist(),
        n_images=len(results), missing=list(missing))


def evaluate_pairs(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]], workers: int = 1) -> MetricReport:
    """Evaluate named (prediction, ground truth) arrays; reduction order is sorted by name."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda a: evaluate_image(*a), pairs))
    else:
        results = [evaluate_image(*a) for a in pairs]
    return aggregate(results)


def load_prediction(path: str | Path) -> np.ndarray:
    return read_gray(path)


def load_ground_truth(path: str | Path) -> np.ndarray:
    return read_gray(path) > 127 / 255.0


def evaluate_dataset(pred_dir: str | Path, gt_dir: str | Path, workers: int = 1) -> MetricReport:
    """Match predictions to ground truths by basename and evaluate every pair.

    Predictions with no ground truth (and vice versa) are logged and listed in
    ``MetricReport.missing``; zero matched pairs is an error.
    """
    preds, gts = list_images(pred_dir), list_images(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    for name in missing:
        log.warning("unmatched file: %s", name)
    names = sorted(set(preds) & set(gts))
    if not names:
        raise ValueError(f"no matching prediction/ground-truth pairs between {pred_dir} and {gt_dir}")

    def job(name):
        p = load_prediction(preds[name])
        t = load_ground_truth(gts[name])
        if p.shape != t.shape:
            p = np.clip(resize_array(p, *t.shape), 0.0, 1.0)
        return evaluate_image(name, p, t)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, names))
    else:
        results = [job(n) for n in names]
    return aggregate(results, missing)
