"""Three-class ground-truth labels for predicted depth, and class weights."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from PIL import Image

from .data import DepthRaster, RasterFormatError

UNDER, CORRECT, OVER = 0, 1, 2
CLASS_NAMES = ("under", "correct", "over")
_MASKED_INDEX = 3
PALETTE = (255, 0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0)  # red, green, blue, black


@dataclass(frozen=True)
class LabelerConfig:
    threshold_t: float = 0.1

    def __post_init__(self):
        if not self.threshold_t > 0:
            raise ValueError("threshold_t must be > 0")


@dataclass
class ErrorLabelMap:
    """Per-pixel class in {UNDER, CORRECT, OVER} plus a 0/1 loss mask."""

    label: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.label.shape != self.mask.shape or self.label.ndim != 2:
            raise ValueError("label and mask must be matching 2-D arrays")
        if self.label.size and self.label.max() > OVER:
            raise ValueError("labels must be in {0, 1, 2}")

    @property
    def height(self) -> int:
        return self.label.shape[0]

    @property
    def width(self) -> int:
        return self.label.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.label[self.mask], minlength=3)[:3]


@dataclass
class ErrorProbabilityMap:
    """Per-pixel class probabilities, shape 3 x H x W (UNDER, CORRECT, OVER)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[0] != 3:
            raise ValueError(f"probabilities must be 3 x H x W, got {self.probs.shape}")

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]

    @property
    def p_under(self) -> np.ndarray:
        return self.probs[UNDER]

    @property
    def p_over(self) -> np.ndarray:
        return self.probs[OVER]

    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0).astype(np.uint8)


@dataclass(frozen=True)
class ClassWeights:
    c_under: float
    c_correct: float
    c_over: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c_under, self.c_correct, self.c_over], dtype=np.float64)

    def scaled(self, factor: float) -> "ClassWeights":
        return ClassWeights(self.c_under * factor, self.c_correct * factor, self.c_over * factor)


def label_arrays(d: np.ndarray, d_star: np.ndarray, t: float) -> np.ndarray:
    diff = d - d_star
    out = np.full(diff.shape, CORRECT, dtype=np.uint8)
    out[diff < -t] = UNDER
    out[diff > t] = OVER
    return out


def label(pred: DepthRaster, gt: DepthRaster, cfg: LabelerConfig) -> ErrorLabelMap:
    """CORRECT iff |d - d*| <= t; UNDER iff d - d* < -t; OVER iff d - d* > t."""
    if pred.depth.shape != gt.depth.shape:
        raise ValueError(f"prediction {pred.depth.shape} and ground truth {gt.depth.shape} differ in size")
    mask = pred.valid & gt.valid
    lab = label_arrays(pred.depth, gt.depth, cfg.threshold_t)
    lab[~mask] = CORRECT
    return ErrorLabelMap(lab, mask)


def _total_counts(label_maps: Iterable[ErrorLabelMap]) -> np.ndarray:
    counts = np.zeros(3, dtype=np.int64)
    n = 0
    for m in label_maps:
        counts += m.counts()
        n += 1
    if n == 0:
        raise ValueError("label corpus is empty")
    return counts


def class_weights(label_maps: Iterable[ErrorLabelMap]) -> ClassWeights:
    """c_j = N_valid / (3 N_j); classes absent from the corpus get weight 0."""
    counts = _total_counts(label_maps)
    total = counts.sum()
    if total == 0:
        raise ValueError("every pixel of the corpus is masked")
    w = np.where(counts > 0, total / (3.0 * np.maximum(counts, 1)), 0.0)
    return ClassWeights(*map(float, w))


def class_distribution(label_maps: Iterable[ErrorLabelMap]) -> tuple[float, float, float]:
    counts = _total_counts(label_maps)
    total = counts.sum()
    if total == 0:
        raise ValueError("corpus has no valid pixels")
    p = counts / total
    return float(p[0]), float(p[1]), float(p[2])


def write_label_png(labels: Union[ErrorLabelMap, np.ndarray], path: Union[str, Path], mask=None) -> None:
    """Paletted PNG: red=UNDER, green=CORRECT, blue=OVER, black=masked."""
    if isinstance(labels, ErrorLabelMap):
        lab, mask = labels.label, labels.mask
    else:
        lab = np.asarray(labels, dtype=np.uint8)
        mask = np.ones(lab.shape, bool) if mask is None else np.asarray(mask, bool)
    idx = np.where(mask, lab, _MASKED_INDEX).astype(np.uint8)
    img = Image.fromarray(idx, mode="P")
    img.putpalette(list(PALETTE))
    img.save(path, format="PNG")


def read_label_png(path: Union[str, Path]) -> ErrorLabelMap:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "P":
                raise RasterFormatError(f"{path}: label maps must be paletted PNGs, got {img.mode}")
            idx = np.array(img)
    except RasterFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise RasterFormatError(f"{path}: malformed PNG ({exc})") from exc
    if idx.max(initial=0) > _MASKED_INDEX:
        raise RasterFormatError(f"{path}: palette index outside label range")
    mask = idx != _MASKED_INDEX
    return ErrorLabelMap(np.where(mask, idx, CORRECT), mask)


def stack_labels(maps: Sequence[ErrorLabelMap]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([m.label for m in maps]), np.stack([m.mask for m in maps])
