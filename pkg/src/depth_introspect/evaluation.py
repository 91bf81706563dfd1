"""Detection precision/recall, the random baseline, and depth accuracy metrics."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .data import DepthRaster
from .labeling import CLASS_NAMES, CORRECT, OVER, UNDER, ErrorLabelMap, ErrorProbabilityMap

DELTA_THRESHOLD = 1.25
BASELINE_MAPS = 10
BASELINE_SIZE = 224

Prediction = Union[ErrorProbabilityMap, ErrorLabelMap, np.ndarray]


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------- detection


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """3x3 counts, rows = ground-truth class, columns = predicted class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError("mask does not match label dimensions")
        pred, gt = pred[mask], gt[mask]
    idx = gt.astype(np.int64).ravel() * 3 + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=9).reshape(3, 3)


@dataclass(frozen=True)
class DetectionReport:
    confusion: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.int64)
        if c.shape != (3, 3) or (c < 0).any():
            raise ValueError("confusion matrix must be a nonnegative 3x3 count array")
        object.__setattr__(self, "confusion", c)

    @property
    def n_valid(self) -> int:
        return int(self.confusion.sum())

    def precision(self, cls: int) -> Optional[float]:
        col = self.confusion[:, cls].sum()
        return None if col == 0 else float(self.confusion[cls, cls] / col)

    def recall(self, cls: int) -> Optional[float]:
        row = self.confusion[cls].sum()
        return None if row == 0 else float(self.confusion[cls, cls] / row)

    @property
    def precision_under(self) -> Optional[float]:
        return self.precision(UNDER)

    @property
    def recall_under(self) -> Optional[float]:
        return self.recall(UNDER)

    @property
    def precision_over(self) -> Optional[float]:
        return self.precision(OVER)

    @property
    def recall_over(self) -> Optional[float]:
        return self.recall(OVER)

    def metrics(self) -> dict[str, Optional[float]]:
        return {
            "under_precision": self.precision_under,
            "under_recall": self.recall_under,
            "over_precision": self.precision_over,
            "over_recall": self.recall_over,
        }

    def mean_metric(self) -> float:
        """Mean of the four under/over metrics, absent ones counting as 0."""
        return float(np.mean([v or 0.0 for v in self.metrics().values()]))

    def merge(self, other: "DetectionReport") -> "DetectionReport":
        return DetectionReport(self.confusion + other.confusion)

    def to_dict(self) -> dict:
        out: dict = {k: v for k, v in self.metrics().items()}
        out["n_valid"] = self.n_valid
        out["confusion"] = self.confusion.tolist()
        return out

    def to_lines(self, prefix: str = "") -> list[str]:
        lines = [f"{prefix}{k}={_fmt(v)}" for k, v in self.metrics().items()]
        lines.append(f"{prefix}n_valid={self.n_valid}")
        for i, name in enumerate(CLASS_NAMES):
            lines.append(f"{prefix}confusion_{name}={' '.join(str(int(x)) for x in self.confusion[i])}")
        return lines


def _pred_labels(pred: Prediction) -> np.ndarray:
    if isinstance(pred, ErrorProbabilityMap):
        return pred.labels()
    if isinstance(pred, ErrorLabelMap):
        return pred.label
    arr = np.asarray(pred)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.dtype.kind == "f":
        return np.argmax(arr, axis=0)
    return arr


def detection_report(pred: Prediction, gt: ErrorLabelMap) -> DetectionReport:
    """Confusion counts over the ground truth's masked-in pixels.

    Probabilities are reduced to labels by per-pixel argmax.
    """
    labels = _pred_labels(pred)
    if labels.shape != gt.label.shape:
        raise ValueError(f"prediction {labels.shape} and ground truth {gt.label.shape} differ in size")
    return DetectionReport(confusion_matrix(labels, gt.label, gt.mask))


def corpus_detection_report(preds: Sequence[Prediction], gts: Sequence[ErrorLabelMap], jobs: int = 1) -> DetectionReport:
    """Sum of per-image confusion counts; sharded across ``jobs`` workers."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} label maps")
    if not gts:
        raise ValueError("empty evaluation corpus")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(detection_report, preds, gts))
    else:
        reports = [detection_report(p, g) for p, g in zip(preds, gts)]
    total = reports[0]
    for r in reports[1:]:
        total = total.merge(r)
    return total


def _check_distribution(distribution: Sequence[float]) -> np.ndarray:
    p = np.asarray(distribution, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"class distribution must be 3 nonnegative values summing to 1, got {tuple(distribution)}")
    return p / p.sum()


def random_baseline(
    distribution: Sequence[float],
    gt_labels: Iterable[ErrorLabelMap],
    seed: int,
    n_maps: int = BASELINE_MAPS,
    size: int = BASELINE_SIZE,
) -> DetectionReport:
    """Score i.i.d. class guesses drawn from ``distribution`` against ground truth.

    ``n_maps`` maps of ``size`` x ``size`` guesses are scored against ground
    truth pixels resampled (with replacement) from the valid pixels of the
    corpus, so corpora of any resolution can be matched.
    """
    p = _check_distribution(distribution)
    pool = [m.label[m.mask] for m in gt_labels]
    pool = np.concatenate(pool) if pool else np.empty(0, np.uint8)
    if pool.size == 0:
        raise ValueError("ground-truth corpus has no valid pixels")
    rng = np.random.default_rng(seed)
    confusion = np.zeros((3, 3), dtype=np.int64)
    for _ in range(n_maps):
        guess = rng.choice(3, size=(size, size), p=p)
        gt = pool[rng.integers(0, pool.size, size=(size, size))]
        confusion += confusion_matrix(guess, gt)
    return DetectionReport(confusion)


# ---------------------------------------------------------------------- depth metrics


@dataclass(frozen=True)
class DepthMetricsReport:
    delta1: float
    abs_rel: float
    rmse: float
    log10_err: float

    def to_dict(self) -> dict:
        return {"delta1": self.delta1, "abs_rel": self.abs_rel, "rmse": self.rmse, "log10": self.log10_err}

    def to_lines(self, prefix: str = "") -> list[str]:
        return [f"{prefix}{k}={v:.6f}" for k, v in self.to_dict().items()]


def depth_metrics(pred: DepthRaster, gt: DepthRaster) -> DepthMetricsReport:
    """delta<1.25 (strict), AbsRel, RMSE and log10 over jointly valid pixels."""
    if pred.depth.shape != gt.depth.shape:
        raise ValueError(f"prediction {pred.depth.shape} and ground truth {gt.depth.shape} differ in size")
    m = pred.valid & gt.valid
    if not m.any():
        raise ValueError("no pixel is valid in both prediction and ground truth")
    d = pred.depth[m]
    ds = gt.depth[m]
    ratio = np.maximum(d / ds, ds / d)
    diff = d - ds
    return DepthMetricsReport(
        delta1=float(np.mean(ratio < DELTA_THRESHOLD)),
        abs_rel=float(np.mean(np.abs(diff) / ds)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        log10_err=float(np.mean(np.abs(np.log10(d) - np.log10(ds)))),
    )


def mean_depth_metrics(reports: Sequence[DepthMetricsReport]) -> DepthMetricsReport:
    """Average of per-image reports."""
    if not reports:
        raise ValueError("no depth reports to average")
    return DepthMetricsReport(
        delta1=float(np.mean([r.delta1 for r in reports])),
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        log10_err=float(np.mean([r.log10_err for r in reports])),
    )


def corpus_depth_metrics(preds: Sequence[DepthRaster], gts: Sequence[DepthRaster], jobs: int = 1) -> DepthMetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth rasters")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(depth_metrics, preds, gts))
    else:
        reports = [depth_metrics(p, g) for p, g in zip(preds, gts)]
    return mean_depth_metrics(reports)


# ---------------------------------------------------------------------- rendering


def render_detection_table(rows: Mapping[str, DetectionReport]) -> str:
    """Fixed-width table with under/over precision and recall per row."""
    header = f"{'method':<24}{'U-prec':>9}{'U-rec':>9}{'O-prec':>9}{'O-rec':>9}"
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        m = r.metrics()
        lines.append(
            f"{name:<24}{_fmt(m['under_precision']):>9}{_fmt(m['under_recall']):>9}"
            f"{_fmt(m['over_precision']):>9}{_fmt(m['over_recall']):>9}"
        )
    return "\n".join(lines) + "\n"


def render_depth_table(before: DepthMetricsReport, after: DepthMetricsReport, name: str = "model") -> str:
    """Before/after columns for each depth metric."""
    header = f"{'model':<16}{'metric':<10}{'before':>10}{'after':>10}"
    lines = [header, "-" * len(header)]
    b, a = before.to_dict(), after.to_dict()
    for i, key in enumerate(b):
        label = name if i == 0 else ""
        lines.append(f"{label:<16}{key:<10}{b[key]:>10.4f}{a[key]:>10.4f}")
    return "\n".join(lines) + "\n"


def dumps_json(obj) -> str:
    """Deterministic JSON used for every report file."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
