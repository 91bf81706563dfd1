"""Iterative depth correction driven by an error detector.

Each round asks the detector for UNDER/CORRECT/OVER probabilities, moves every
confidently flagged pixel one fixed step toward the implied direction, and
feeds the updated depth back in as the detector's depth input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import DEPTH_FLOOR, DepthRaster, RgbImage
from .dedn import DednModel, infer
from .evaluation import depth_metrics
from .labeling import OVER, UNDER, ErrorProbabilityMap, LabelerConfig, label

log = logging.getLogger(__name__)

Views = Sequence[tuple[RgbImage, DepthRaster]]
Detector = Callable[[Views], ErrorProbabilityMap]


@dataclass(frozen=True)
class CorrectionConfig:
    confidence_threshold: float = 0.7
    step: float = 0.01
    iterations: int = 15
    depth_floor: float = DEPTH_FLOOR

    def __post_init__(self):
        if not 0.5 < self.confidence_threshold < 1:
            raise ValueError("confidence_threshold must be in (0.5, 1)")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError("iterations must be an integer >= 1")
        if not self.depth_floor > 0:
            raise ValueError("depth_floor must be > 0")


def correct_once(pred: DepthRaster, probs: ErrorProbabilityMap, cfg: CorrectionConfig) -> DepthRaster:
    """One fixed-size nudge at confidently flagged valid pixels.

    Pixels where both UNDER and OVER exceed the threshold are left alone.
    An OVER nudge never pushes depth below the floor, and never raises a
    pixel that already sits under it.
    """
    if probs.probs.shape[1:] != pred.depth.shape:
        raise ValueError(f"probabilities {probs.probs.shape[1:]} and depth {pred.depth.shape} differ in size")
    up = probs.p_under > cfg.confidence_threshold
    down = probs.p_over > cfg.confidence_threshold
    tie = up & down
    if tie.any():
        ys, xs = np.nonzero(tie & pred.valid)
        for y, x in zip(ys, xs):
            log.info("conflicting under/over evidence at (%d, %d); left unchanged", y, x)
    up &= pred.valid & ~tie
    down &= pred.valid & ~tie
    d = pred.depth.copy()
    d[up] += cfg.step
    floor = np.minimum(d[down], cfg.depth_floor)
    d[down] = np.maximum(d[down] - cfg.step, floor)
    return DepthRaster(d, pred.valid.copy())


def model_detector(model: DednModel) -> Detector:
    return lambda views: infer(model, views)


def oracle_detector(gt: DepthRaster, threshold_t: float) -> Detector:
    """One-hot probabilities from the ground-truth labeler applied to the current depth."""
    cfg = LabelerConfig(threshold_t)

    def detect(views: Views) -> ErrorProbabilityMap:
        lab = label(views[0][1], gt, cfg)
        probs = np.zeros((3,) + lab.label.shape)
        np.put_along_axis(probs, lab.label[None].astype(np.intp), 1.0, axis=0)
        return ErrorProbabilityMap(probs)

    return detect


@dataclass
class CorrectionResult:
    depth: DepthRaster
    trace: list[dict] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False

    def trace_lines(self) -> list[str]:
        out = []
        for row in self.trace:
            out.append(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        return out


def _trace_row(i: int, depth: DepthRaster, gt: Optional[DepthRaster], changed: int) -> dict:
    row: dict = {"iteration": i, "changed": changed}
    if gt is not None:
        m = depth_metrics(depth, gt)
        row["rmse"] = m.rmse
        row["abs_rel"] = m.abs_rel
    return row


def correct_iterative(
    pred: DepthRaster,
    views: Views,
    model: Union[DednModel, Detector],
    cfg: CorrectionConfig,
    gt: Optional[DepthRaster] = None,
) -> CorrectionResult:
    """Run up to ``cfg.iterations`` rounds of detect then correct.

    ``views[0]``'s depth is replaced by the running estimate each round; any
    further views are passed through unchanged. When ``gt`` is given the trace
    holds RMSE/AbsRel before correction (iteration 0) and after every round.
    Stops early once a round changes nothing, since every later round would
    see the same input.
    """
    detector = model_detector(model) if isinstance(model, DednModel) else model
    if not views:
        raise ValueError("at least one view is required")
    rest = list(views[1:])
    rgb0 = views[0][0]
    depth = pred
    result = CorrectionResult(depth)
    result.trace.append(_trace_row(0, depth, gt, 0))
    for i in range(1, cfg.iterations + 1):
        probs = detector([(rgb0, depth)] + rest)
        new = correct_once(depth, probs, cfg)
        changed = int(np.count_nonzero(new.depth != depth.depth))
        result.iterations_run = i
        if changed == 0:
            result.converged = True
            result.trace.append(_trace_row(i, depth, gt, 0))
            break
        depth = new
        result.trace.append(_trace_row(i, depth, gt, changed))
    result.depth = depth
    return result
