"""Class-weighted per-pixel cross-entropy and the SGD loop that fits a detector."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import SceneSample
from .dedn import DednModel, predict_arrays, stack_views
from .evaluation import DetectionReport, confusion_matrix
from .labeling import (
    ClassWeights,
    ErrorLabelMap,
    ErrorProbabilityMap,
    LabelerConfig,
    class_weights,
    label,
)
from .nn.optim import SGD
from .nn.tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    class_weights: ClassWeights
    epsilon_log: float = 1e-7

    def __post_init__(self):
        if not 0 < self.epsilon_log <= 1e-3:
            raise ValueError("epsilon_log must be in (0, 1e-3]")
        w = self.class_weights.as_array()
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise ValueError("class weights must be finite and nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        # 0 is allowed: it runs the loop without moving any weight
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------- loss


def weighted_ce_arrays(
    probs: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    weights: np.ndarray,
    epsilon: float,
) -> tuple[float, np.ndarray]:
    """Batched loss over B x 3 x H x W probabilities; returns (loss, dL/dprobs).

    N is the total pixel count B*H*W, masked pixels included.
    """
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[1] != 3:
        raise ValueError(f"probabilities must be B x 3 x H x W, got {probs.shape}")
    if labels.shape != (probs.shape[0],) + probs.shape[2:] or mask.shape != labels.shape:
        raise ValueError(f"labels {labels.shape} / mask {mask.shape} do not match probabilities {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("probabilities contain non-finite values")
    p = probs.astype(np.float64)
    n = labels.size
    idx = labels.astype(np.intp)[:, None]
    p_true = np.take_along_axis(p, idx, axis=1)[:, 0]
    coef = mask * np.asarray(weights, dtype=np.float64)[labels]
    clamped = np.maximum(p_true, epsilon)
    loss = 0.0 - float(np.sum(coef * np.log(clamped))) / n  # 0.0 - x turns -0.0 into 0.0
    g_true = np.where(p_true > epsilon, -coef / (n * clamped), 0.0)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, idx, g_true[:, None], axis=1)
    return loss, grad


def weighted_ce_loss(probs: ErrorProbabilityMap, labels: ErrorLabelMap, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Single-image loss and its exact gradient with respect to ``probs.probs``."""
    if probs.probs.shape[1:] != labels.label.shape:
        raise ValueError(f"probabilities {probs.probs.shape[1:]} and labels {labels.label.shape} differ in size")
    loss, grad = weighted_ce_arrays(
        probs.probs[None], labels.label[None], labels.mask[None], cfg.class_weights.as_array(), cfg.epsilon_log
    )
    return loss, grad[0]


# ---------------------------------------------------------------------- corpus


@dataclass
class LabeledCorpus:
    """Network-ready arrays: one (rgb, depth) pair per view slot plus labels and masks."""

    views: list[tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def label_maps(self) -> list[ErrorLabelMap]:
        return [ErrorLabelMap(l, m) for l, m in zip(self.labels, self.masks)]

    def subset(self, idx) -> "LabeledCorpus":
        return LabeledCorpus([(r[idx], d[idx]) for r, d in self.views], self.labels[idx], self.masks[idx])


def build_corpus(
    samples: Sequence[SceneSample],
    label_cfg: LabelerConfig,
    n_views: int = 1,
    depth_scale: float = 10.0,
    dtype=np.float32,
) -> LabeledCorpus:
    """Label each sample's first-view prediction against its ground truth."""
    if not samples:
        raise ValueError("corpus is empty")
    maps = [label(s.pred_depth, s.gt_depth, label_cfg) for s in samples]
    views = stack_views([s.views(n_views) for s in samples], depth_scale, dtype=dtype)
    return LabeledCorpus(views, np.stack([m.label for m in maps]), np.stack([m.mask for m in maps]))


# ---------------------------------------------------------------------- loop


@dataclass
class EpochStats:
    epoch: int
    loss: float
    report: DetectionReport

    def line(self) -> str:
        m = self.report.metrics()
        parts = [f"epoch={self.epoch}", f"loss={self.loss:.6f}"]
        parts += [f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in m.items()]
        return " ".join(parts)


@dataclass
class TrainResult:
    model: DednModel
    history: list[EpochStats] = field(default_factory=list)
    loss_config: Optional[LossConfig] = None

    @property
    def loss_curve(self) -> list[float]:
        return [h.loss for h in self.history]


def train(
    model: DednModel,
    corpus: Union[LabeledCorpus, Sequence[SceneSample]],
    label_cfg: LabelerConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    log_line: Optional[Callable[[str], None]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Fit ``model`` in place with SGD + momentum over shuffled minibatches.

    Class weights default to the inverse-frequency weights of the corpus.
    Precision/recall per epoch are read off the training-mode forward passes.
    When ``checkpoint_dir`` is set a checkpoint is written every
    ``checkpoint_every`` epochs and after the last one.
    """
    if not isinstance(corpus, LabeledCorpus):
        corpus = build_corpus(list(corpus), label_cfg, model.config.n_views, model.config.depth_scale, model.dtype)
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if len(corpus.views) != model.config.n_views:
        raise ValueError(f"corpus has {len(corpus.views)} view slot(s), model expects {model.config.n_views}")
    if loss_cfg is None:
        loss_cfg = LossConfig(class_weights(corpus.label_maps()))
    weights = loss_cfg.class_weights.as_array()
    emit = log_line or (lambda s: log.info("%s", s))

    rng = np.random.default_rng(train_cfg.seed)
    opt = SGD(model.parameters(), lr=train_cfg.learning_rate, momentum=train_cfg.momentum)
    dtype = model.dtype
    n = len(corpus)
    result = TrainResult(model, loss_config=loss_cfg)
    model.train()
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        total = 0.0
        confusion = np.zeros((3, 3), dtype=np.int64)
        for b, lo in enumerate(range(0, n, train_cfg.batch_size)):
            idx = np.sort(order[lo:lo + train_cfg.batch_size])
            views = [(Tensor(r[idx], dtype=dtype), Tensor(d[idx], dtype=dtype)) for r, d in corpus.views]
            labels, masks = corpus.labels[idx], corpus.masks[idx]
            try:
                out = model(views)
                loss, grad = weighted_ce_arrays(out.data, labels, masks, weights, loss_cfg.epsilon_log)
            except (NonFiniteError, ValueError) as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: non-finite forward pass ({exc})") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch} batch {b}: loss is {loss}; lower the learning rate")
            opt.zero_grad()
            out.backward(grad.astype(dtype))
            for p in opt.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingError(f"epoch {epoch} batch {b}: non-finite gradient in parameter {p.name}")
            opt.step()
            total += loss * len(idx)
            confusion += confusion_matrix(np.argmax(out.data, axis=1), labels, masks)
        stats = EpochStats(epoch, total / n, DetectionReport(confusion))
        result.history.append(stats)
        emit(stats.line())
        if checkpoint_dir is not None and (
            epoch == train_cfg.epochs or (checkpoint_every and epoch % checkpoint_every == 0)
        ):
            path = Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            model.save(path / f"epoch{epoch:03d}.ckpt")
    return result


def pixel_accuracy(model: DednModel, corpus: LabeledCorpus, batch_size: int = 16) -> float:
    """Fraction of masked-in pixels whose argmax class matches the label."""
    pred = np.argmax(predict_arrays(model, corpus.views, batch_size), axis=1)
    hit = (pred == corpus.labels) & corpus.masks
    return float(hit.sum() / max(corpus.masks.sum(), 1))
