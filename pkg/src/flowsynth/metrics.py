"""Saliency metrics (S-measure, F-measure, MAE) and dataset aggregation.

S-measure follows the structural measure of Fan et al. (ICCV 2017): an
object-aware term comparing foreground/background score distributions and a
region-aware term averaging SSIM-style similarity over the four quadrants
split at the ground-truth centroid.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, MissingPrediction, PredOutOfRange
from .imaging import read_gray, read_mask, resize_bilinear

N_THRESHOLDS = 256
F_PROTOCOLS = ("max", "mean", "adaptive")


def _prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > 1 or not np.all(np.isfinite(pred))):
        raise PredOutOfRange("predictions must lie in [0, 1]")
    return pred, gt > 0.5


# ------------------------------------------------------------------ S-measure

def _ssim_region(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4 * x * y * sxy
    b = (x**2 + y**2) * (sx + sy)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def _s_object(values):
    if values.size == 0:
        return 0.0
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mu / (mu**2 + 1.0 + sigma)


def _object_score(pred, gt):
    u = gt.mean()
    fg = _s_object(pred[gt])
    bg = _s_object(1.0 - pred[~gt])
    return u * fg + (1 - u) * bg


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    # 1-based centroid rounded half away from zero, as in the reference implementation
    return int(np.floor(cols.mean() + 1.5)), int(np.floor(rows.mean() + 1.5))


def _region_score(pred, gt):
    h, w = gt.shape
    x, y = _centroid(gt)
    quadrants = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    # quadrant weights are pixel shares; accumulate integer counts so they sum to 1 exactly
    total = 0.0
    for rs, cs in quadrants:
        p, g = pred[rs, cs], gt[rs, cs]
        if p.size:
            total += p.size * _ssim_region(p, g.astype(np.float64))
    return total / (h * w)


def s_measure(pred, gt, alpha=0.5):
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)
    return float(max(score, 0.0))


# ------------------------------------------------------------------ F-measure

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray


def _f_from_pr(p, r, beta2):
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def _pr_at(pred, gt, thresholds):
    fg = np.sort(pred[gt])
    bg = np.sort(pred[~gt])
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    fp = bg.size - np.searchsorted(bg, thresholds, side="left")
    tp = tp.astype(np.float64)
    p = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    r = tp / fg.size if fg.size else np.zeros_like(tp)
    return p, r


def f_curve(pred, gt, beta2=0.3, n_thresholds=N_THRESHOLDS):
    """Precision, recall and F at evenly spaced thresholds in [0, 1] (pred >= thr is positive)."""
    pred, gt = _prepare(pred, gt)
    thr = np.linspace(0.0, 1.0, n_thresholds)
    p, r = _pr_at(pred, gt, thr)
    return PRCurve(thr, p, r, _f_from_pr(p, r, beta2))


def f_measure(pred, gt, beta2=0.3, protocol="max", return_curve=False):
    if protocol not in F_PROTOCOLS:
        raise ValueError(f"protocol must be one of {F_PROTOCOLS}")
    curve = f_curve(pred, gt, beta2)
    if protocol == "max":
        score = float(curve.fmeasure.max())
    elif protocol == "mean":
        score = float(curve.fmeasure.mean())
    else:
        pred_arr, gt_arr = _prepare(pred, gt)
        thr = min(2.0 * pred_arr.mean(), 1.0)
        p, r = _pr_at(pred_arr, gt_arr, np.array([thr]))
        score = float(_f_from_pr(p, r, beta2)[0])
    return (score, curve) if return_curve else score


def mae(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return float(np.abs(pred - gt).mean())


def frame_metrics(pred, gt, protocol="max"):
    return {
        "S": s_measure(pred, gt),
        "F": f_measure(pred, gt, protocol=protocol),
        "M": mae(pred, (np.asarray(gt) > 0.5).astype(np.float64)),
    }


# ---------------------------------------------------------------- aggregation

@dataclass
class MetricReport:
    """Per-video and dataset means; values stored unscaled in [0, 1]."""

    dataset: str
    protocol: str
    videos: dict = field(default_factory=dict)
    S: float = 0.0
    F: float = 0.0
    M: float = 0.0

    def scaled(self):
        return {"S": 100 * self.S, "F": 100 * self.F, "M": 100 * self.M}

    def to_records(self):
        head = {"kind": "dataset", "dataset": self.dataset, "protocol": self.protocol,
                "S": self.S, "F": self.F, "M": self.M, "n_videos": len(self.videos)}
        rows = [head]
        for vid in sorted(self.videos):
            rows.append({"kind": "video", "dataset": self.dataset, "video": vid, **self.videos[vid]})
        return rows

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path):
        """Read every dataset block in a report file."""
        reports = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "dataset":
                reports[rec["dataset"]] = cls(rec["dataset"], rec["protocol"], {}, rec["S"], rec["F"], rec["M"])
            elif rec["kind"] == "video":
                vals = {k: v for k, v in rec.items() if k not in ("kind", "dataset", "video")}
                reports[rec["dataset"]].videos[rec["video"]] = vals
        return list(reports.values())


def aggregate(frame_scores, dataset, protocol):
    """``frame_scores`` maps ``(video, t) -> {S, F, M}``; average per video then per dataset."""
    by_video = {}
    for (vid, _t), vals in sorted(frame_scores.items()):
        by_video.setdefault(vid, []).append(vals)
    videos = {}
    for vid, rows in by_video.items():
        videos[vid] = {k: float(np.mean([r[k] for r in rows])) for k in ("S", "F", "M")}
        videos[vid]["frames"] = len(rows)
    means = {k: float(np.mean([v[k] for v in videos.values()])) for k in ("S", "F", "M")}
    return MetricReport(dataset, protocol, videos, **means)


def prediction_path(pred_dir, source_id, t):
    return Path(pred_dir) / source_id / f"{int(t):03d}.png"


def evaluate_dataset(pred_dir, gt_manifest, protocol="max", dataset=None):
    """Score ``pred_dir/<source_id>/<t:03d>.png`` against every frame in ``gt_manifest``."""
    from .triplets import DatasetManifest

    manifest = gt_manifest if isinstance(gt_manifest, DatasetManifest) else DatasetManifest.load(gt_manifest)
    records = sorted(manifest.records, key=lambda r: (r.source_id, r.t))
    missing = [f"{r.source_id}/{r.t:03d}" for r in records
               if not prediction_path(pred_dir, r.source_id, r.t).exists()]
    if missing:
        raise MissingPrediction(missing)
    scores = {}
    for r in records:
        gt = read_mask(manifest.resolve(r.mask_path))
        pred = read_gray(prediction_path(pred_dir, r.source_id, r.t))
        if pred.shape != gt.shape:
            pred = np.clip(resize_bilinear(pred, *gt.shape), 0.0, 1.0)
        scores[(r.source_id, r.t)] = frame_metrics(pred, gt, protocol)
    return aggregate(scores, dataset or manifest.name, protocol)


def average_reports(reports):
    """Unweighted mean of dataset means (the cross-dataset "Average" column)."""
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("S", "F", "M")}
