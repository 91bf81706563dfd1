"""Depth error detection network.

Each view is encoded by a pair of residual branches (RGB, predicted depth)
with identical stage shapes. A U-Net style decoder upsamples the bottleneck,
merging a 3x3-conv projection of the concatenated branch features at every
level. With two views the encoders are shared and the two view embeddings
are fused at the bottleneck by concatenation and a 3x3 convolution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import DepthRaster, RgbImage
from .labeling import ErrorProbabilityMap
from .nn import checkpoint
from .nn import functional as F
from .nn.layers import Layer, LayerSpec, build_layer
from .nn.optim import SGD
from .nn.tensor import Tensor, no_grad, precision

HEADS = ("softmax", "sigmoid")


@dataclass(frozen=True)
class DednConfig:
    height: int = 64
    width: int = 64
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    n_views: int = 1
    head: str = "softmax"
    leaky_slope: float = 0.01
    depth_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels:
            raise ValueError("the encoder needs at least one stage")
        if min(self.stage_channels) < 1 or self.stem_channels < 1 or self.blocks_per_stage < 0:
            raise ValueError("channel counts must be positive and blocks_per_stage >= 0")
        step = 2 ** len(self.stage_channels)
        if self.height % step or self.width % step or self.height < 1 or self.width < 1:
            raise ValueError(f"resolution {self.height}x{self.width} must be a positive multiple of {step}")
        if self.n_views not in (1, 2):
            raise ValueError("n_views must be 1 or 2")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be > 0")

    @property
    def levels(self) -> tuple[int, ...]:
        """Channel width per encoder level; level 0 is the full-resolution stem."""
        return (self.stem_channels,) + self.stage_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DednConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class _Block:
    """An ordered run of layers applied one after another."""

    def __init__(self, named_layers: Sequence[Layer]):
        self.layers = list(named_layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def _mk(kind: str, c_in, c_out: int, rng, name: str, slope: float) -> Layer:
    return build_layer(LayerSpec(kind, c_in, c_out, slope=slope), rng, name)


class ResidualEncoder:
    """Stem at full resolution, then stages of stride-2 conv + residual blocks."""

    def __init__(self, in_channels: int, cfg: DednConfig, rng: np.random.Generator, prefix: str):
        s = cfg.leaky_slope
        c0 = cfg.stem_channels
        self.in_channels = in_channels
        self.stem = _Block([
            _mk("conv3x3", in_channels, c0, rng, f"{prefix}.stem.conv", s),
            _mk("batchnorm", c0, c0, rng, f"{prefix}.stem.bn", s),
            _mk("leaky_relu", c0, c0, rng, f"{prefix}.stem.act", s),
        ])
        self.stages = []
        prev = c0
        for i, c in enumerate(cfg.stage_channels, 1):
            layers = [
                _mk("downsample_stride2", prev, c, rng, f"{prefix}.stage{i}.down", s),
                _mk("batchnorm", c, c, rng, f"{prefix}.stage{i}.bn", s),
                _mk("leaky_relu", c, c, rng, f"{prefix}.stage{i}.act", s),
            ]
            layers += [_mk("residual_block", c, c, rng, f"{prefix}.stage{i}.res{k}", s)
                       for k in range(cfg.blocks_per_stage)]
            self.stages.append(_Block(layers))
            prev = c

    def layers(self) -> list[Layer]:
        out = list(self.stem.layers)
        for st in self.stages:
            out += st.layers
        return out

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = [self.stem(x)]
        for st in self.stages:
            feats.append(st(feats[-1]))
        return feats


class ViewFeatureEncoder:
    def __init__(self, cfg: DednConfig, rng: np.random.Generator):
        self.rgb_branch = ResidualEncoder(3, cfg, rng, "encoder.rgb")
        self.depth_branch = ResidualEncoder(1, cfg, rng, "encoder.depth")

    def layers(self) -> list[Layer]:
        return self.rgb_branch.layers() + self.depth_branch.layers()

    def __call__(self, rgb: Tensor, depth: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        return self.rgb_branch(rgb), self.depth_branch(depth)


FUSION_INIT_SCALE = 0.1


def _pass_first_view(conv: Layer, width: int) -> None:
    """Start the fusion conv as (almost) the identity on the first view's embedding.

    The random weights are shrunk and the centre tap maps first-view channel k
    to output k, so an untrained two-view model behaves like the single-view
    one and the second view's contribution is learned from there.
    """
    w = conv.params["weight"].data
    w *= FUSION_INIT_SCALE
    idx = np.arange(width)
    w[idx, idx, 1, 1] += 1.0


class DednModel:
    def __init__(self, cfg: DednConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        s = cfg.leaky_slope
        ch = cfg.levels
        top = len(ch) - 1
        self.encoder = ViewFeatureEncoder(cfg, rng)

        self.branch_concat = [_mk("concat_channels", (c, c), 2 * c, rng, f"decoder.level{i}.cat_branches", s)
                              for i, c in enumerate(ch)]
        self.skip_convs = [
            _Block([_mk("conv3x3", 2 * c, c, rng, f"decoder.level{i}.skip_conv", s),
                    _mk("leaky_relu", c, c, rng, f"decoder.level{i}.skip_act", s)])
            for i, c in enumerate(ch[:-1])
        ]
        c_top = ch[-1]
        self.fusion = None
        if cfg.n_views == 2:
            # own stream, so every shared layer starts from the single-view weights
            fuse_rng = np.random.default_rng([cfg.seed, 1])
            self.fusion = _Block([
                _mk("concat_channels", (2 * c_top, 2 * c_top), 4 * c_top, fuse_rng, "fusion.cat_views", s),
                _mk("conv3x3", 4 * c_top, 2 * c_top, fuse_rng, "fusion.conv", s),
                _mk("leaky_relu", 2 * c_top, 2 * c_top, fuse_rng, "fusion.act", s),
            ])
            _pass_first_view(self.fusion.layers[1], 2 * c_top)
        self.bottleneck = _Block([
            _mk("conv3x3", 2 * c_top, c_top, rng, f"decoder.level{top}.skip_conv", s),
            _mk("leaky_relu", c_top, c_top, rng, f"decoder.level{top}.skip_act", s),
        ])
        # up[level] maps level -> level-1
        self.merge = {}
        self.up = {}
        for lvl in range(top, 0, -1):
            c_in = ch[lvl] if lvl == top else 2 * ch[lvl]
            if lvl < top:
                self.merge[lvl] = _mk("concat_channels", (ch[lvl], ch[lvl]), 2 * ch[lvl], rng,
                                      f"decoder.level{lvl}.cat_skip", s)
            c_out = ch[lvl - 1]
            self.up[lvl] = _Block([
                _mk("upsample_nearest2x", c_in, c_in, rng, f"decoder.up{lvl}.upsample", s),
                _mk("conv3x3", c_in, c_out, rng, f"decoder.up{lvl}.conv", s),
                _mk("batchnorm", c_out, c_out, rng, f"decoder.up{lvl}.bn", s),
                _mk("leaky_relu", c_out, c_out, rng, f"decoder.up{lvl}.act", s),
            ])
        c0 = ch[0]
        self.merge[0] = _mk("concat_channels", (c0, c0), 2 * c0, rng, "decoder.level0.cat_skip", s)
        self.refine = _Block([
            _mk("conv3x3", 2 * c0, c0, rng, "head.refine", s),
            _mk("leaky_relu", c0, c0, rng, "head.refine_act", s),
        ])
        self.head = _Block([
            _mk("conv3x3", c0, 3, rng, "head.conv", s),
            _mk("softmax_channels" if cfg.head == "softmax" else "sigmoid", 3, 3, rng, "head.norm", s),
        ])

    # ------------------------------------------------------------------ structure

    def named_layers(self) -> list[Layer]:
        out = self.encoder.layers() + list(self.branch_concat)
        for b in self.skip_convs:
            out += b.layers
        if self.fusion is not None:
            out += self.fusion.layers
        out += self.bottleneck.layers
        for lvl in sorted(self.up, reverse=True):
            if lvl in self.merge:
                out.append(self.merge[lvl])
            out += self.up[lvl].layers
        out.append(self.merge[0])
        out += self.refine.layers + self.head.layers
        return out

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.named_layers() for p in layer.parameters()]

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "DednModel":
        for layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self) -> "DednModel":
        return self.train(False)

    @property
    def training(self) -> bool:
        return any(l.training for l in self.named_layers() if l.spec.kind in ("batchnorm", "residual_block"))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "DednModel":
        for layer in self.named_layers():
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    # ------------------------------------------------------------------ compute

    def embed(self, rgb: Tensor, depth: Tensor) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Bottleneck embedding of one view plus both branches' per-level features."""
        r, d = self.encoder(rgb, depth)
        return self.branch_concat[-1](r[-1], d[-1]), r, d

    def forward(
        self,
        views: Sequence[tuple[Tensor, Tensor]],
        ablate_skips: Iterable[int] = (),
        zero_views: Iterable[int] = (),
    ) -> Tensor:
        """Class probabilities N x 3 x H x W for the first view.

        ``ablate_skips`` zeroes the skip input at the given decoder levels and
        ``zero_views`` zeroes the given views' bottleneck embeddings; both
        exist for plumbing checks.
        """
        cfg = self.config
        if len(views) != cfg.n_views:
            raise ValueError(f"model expects {cfg.n_views} view(s), got {len(views)}")
        ablate_skips = set(ablate_skips)
        zero_views = set(zero_views)
        embs = []
        feats = None
        for v, (rgb, depth) in enumerate(views):
            if rgb.shape[2:] != (cfg.height, cfg.width) or depth.shape[2:] != (cfg.height, cfg.width):
                raise ValueError(
                    f"resolution mismatch: model configured for {cfg.height}x{cfg.width}, "
                    f"view {v} is {rgb.shape[2]}x{rgb.shape[3]}"
                )
            e, r, d = self.embed(rgb, depth)
            if v in zero_views:
                e = Tensor(np.zeros_like(e.data), dtype=e.dtype)
            embs.append(e)
            if v == 0:
                feats = (r, d)
        if self.fusion is not None:
            x = self._fuse(embs)
        else:
            x = embs[0]
        x = self.bottleneck(x)

        r, d = feats
        top = len(cfg.levels) - 1
        for lvl in range(top, 0, -1):
            if lvl < top:
                x = self.merge[lvl](x, self._skip(lvl, r, d, lvl in ablate_skips))
            x = self.up[lvl](x)
        x = self.merge[0](x, self._skip(0, r, d, 0 in ablate_skips))
        return self.head(self.refine(x))

    def _fuse(self, embs: list[Tensor]) -> Tensor:
        cat, conv, act = self.fusion.layers
        return act(conv(cat(*embs)))

    def _skip(self, lvl: int, r: list[Tensor], d: list[Tensor], ablate: bool) -> Tensor:
        s = self.skip_convs[lvl](self.branch_concat[lvl](r[lvl], d[lvl]))
        if ablate:
            return Tensor(np.zeros_like(s.data), dtype=s.dtype)
        return s

    __call__ = forward

    # ------------------------------------------------------------------ persistence

    def save(self, path: Union[str, Path]) -> None:
        """Write parameters to ``path`` and the architecture to ``path`` + '.json'."""
        path = Path(path)
        checkpoint.save(path, self.named_layers())
        Path(str(path) + ".json").write_text(json.dumps({"model": self.config.to_dict()}, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DednModel":
        path = Path(path)
        cfg_path = Path(str(path) + ".json")
        if not path.exists():
            raise FileNotFoundError(f"model checkpoint not found: {path}")
        if not cfg_path.exists():
            raise FileNotFoundError(f"model architecture file not found: {cfg_path}")
        cfg = DednConfig.from_dict(json.loads(cfg_path.read_text())["model"])
        with precision(np.float32):
            model = cls(cfg)
        checkpoint.load(path, model.named_layers())
        return model


# ---------------------------------------------------------------------- inputs


def view_arrays(rgb: RgbImage, depth: DepthRaster, depth_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """(3, H, W) image and (1, H, W) depth divided by ``depth_scale``, 0 where invalid."""
    if rgb.data.shape[:2] != depth.depth.shape:
        raise ValueError(f"RGB {rgb.data.shape[:2]} and depth {depth.depth.shape} differ in size")
    x_rgb = np.ascontiguousarray(rgb.data.transpose(2, 0, 1))
    x_d = np.where(depth.valid, depth.depth / depth_scale, 0.0)[None]
    return x_rgb, x_d


def stack_views(view_lists: Sequence[Sequence[tuple[RgbImage, DepthRaster]]], depth_scale: float,
                dtype=np.float32) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batch arrays per view slot: [(B x 3 x H x W, B x 1 x H x W), ...]."""
    n_views = len(view_lists[0])
    out = []
    for v in range(n_views):
        pairs = [view_arrays(*views[v], depth_scale) for views in view_lists]
        out.append((np.stack([p[0] for p in pairs]).astype(dtype), np.stack([p[1] for p in pairs]).astype(dtype)))
    return out


def predict_arrays(model: DednModel, arrays: Sequence[tuple[np.ndarray, np.ndarray]], batch_size: int = 16) -> np.ndarray:
    """Eval-mode class probabilities for batched view arrays, B x 3 x H x W."""
    was_training = model.training
    model.eval()
    try:
        n = arrays[0][0].shape[0]
        chunks = []
        with no_grad():
            for lo in range(0, n, batch_size):
                views = [(Tensor(r[lo:lo + batch_size], dtype=model.dtype), Tensor(d[lo:lo + batch_size], dtype=model.dtype))
                         for r, d in arrays]
                chunks.append(model(views).data)
        return np.concatenate(chunks)
    finally:
        model.train(was_training)


def infer(model: DednModel, views: Sequence[tuple[RgbImage, DepthRaster]]) -> ErrorProbabilityMap:
    """Per-pixel {UNDER, CORRECT, OVER} probabilities for the first view's depth."""
    cfg = model.config
    if len(views) != cfg.n_views:
        raise ValueError(f"model expects {cfg.n_views} view(s), got {len(views)}")
    for i, (rgb, depth) in enumerate(views):
        if depth.depth.shape != (cfg.height, cfg.width) or rgb.data.shape[:2] != (cfg.height, cfg.width):
            raise ValueError(
                f"resolution mismatch: model trained for {cfg.height}x{cfg.width}, "
                f"view {i} is {depth.height}x{depth.width}"
            )
    arrays = stack_views([list(views)], cfg.depth_scale, dtype=model.dtype)
    return ErrorProbabilityMap(predict_arrays(model, arrays)[0])


# ---------------------------------------------------------------------- distillation


@dataclass
class DistillResult:
    loss_curve: list[float]
    heldout_curve: list[float] = field(default_factory=list)


def _final_features(branch: ResidualEncoder, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            outs.append(branch(Tensor(x[lo:lo + batch_size], dtype=x.dtype))[-1].data)
    return np.concatenate(outs)


def _set_mode(branch: ResidualEncoder, training: bool) -> None:
    for layer in branch.layers():
        layer.training = training


def _check_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    try:
        teacher_x, student_x = pairs
    except (TypeError, ValueError) as exc:
        raise ValueError("distillation corpus must be a (teacher_inputs, student_inputs) pair") from exc
    teacher_x = np.asarray(teacher_x)
    student_x = np.asarray(student_x)
    if teacher_x.ndim != 4 or student_x.ndim != 4:
        raise ValueError("distillation inputs must be N x C x H x W arrays")
    if teacher_x.shape[0] != student_x.shape[0]:
        raise ValueError(f"unpaired corpus: {teacher_x.shape[0]} teacher vs {student_x.shape[0]} student entries")
    if teacher_x.shape[2:] != student_x.shape[2:]:
        raise ValueError(f"unpaired corpus: spatial sizes {teacher_x.shape[2:]} vs {student_x.shape[2:]}")
    return teacher_x, student_x


def distill_pairs(samples_or_views: Sequence, depth_scale: float = 10.0, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(rgb, depth) batches for distillation from (RgbImage, DepthRaster) pairs."""
    rgbs, depths = [], []
    for item in samples_or_views:
        rgb, depth = item if isinstance(item, tuple) else (item.rgb, item.gt_depth)
        if not isinstance(rgb, RgbImage) or not isinstance(depth, DepthRaster):
            raise ValueError("unpaired corpus entry: expected (RgbImage, DepthRaster)")
        a, b = view_arrays(rgb, depth, depth_scale)
        rgbs.append(a)
        depths.append(b)
    return np.stack(rgbs).astype(dtype), np.stack(depths).astype(dtype)


def distill_loss(student: ResidualEncoder, teacher: ResidualEncoder, pairs, batch_size: int = 16) -> float:
    """Eval-mode MSE between final-stage features of the two branches."""
    teacher_x, student_x = _check_pairs(pairs)
    modes = (student.layers()[0].training, teacher.layers()[0].training)
    _set_mode(student, False)
    _set_mode(teacher, False)
    try:
        t = _final_features(teacher, teacher_x, batch_size)
        s = _final_features(student, student_x, batch_size)
    finally:
        _set_mode(student, modes[0])
        _set_mode(teacher, modes[1])
    return float(np.mean((s.astype(np.float64) - t) ** 2))


def pretrain_distill(
    depth_branch: ResidualEncoder,
    frozen_rgb_branch: ResidualEncoder,
    pairs,
    epochs: int,
    learning_rate: float = 1e-2,
    momentum: float = 0.9,
    batch_size: int = 8,
    seed: int = 0,
    heldout=None,
) -> DistillResult:
    """Train ``depth_branch`` to reproduce the frozen RGB branch's final features.

    ``pairs`` is (teacher_inputs, student_inputs), both N x C x H x W. The
    teacher runs in eval mode and is never updated. The student's batch-norm
    statistics stay frozen too, so it is fitted under the same normalization
    it is scored with. ``loss_curve[0]`` is the loss before any step; entry k
    is the loss after epoch k.
    """
    teacher_x, student_x = _check_pairs(pairs)
    if depth_branch.stages and len(depth_branch.stages) != len(frozen_rgb_branch.stages):
        raise ValueError("branches must share stage shapes")
    teacher_mode = frozen_rgb_branch.layers()[0].training
    _set_mode(frozen_rgb_branch, False)
    try:
        targets = _final_features(frozen_rgb_branch, teacher_x, batch_size)
    finally:
        _set_mode(frozen_rgb_branch, teacher_mode)

    params = [p for layer in depth_branch.layers() for p in layer.parameters()]
    opt = SGD(params, learning_rate, momentum)
    rng = np.random.default_rng(seed)
    result = DistillResult([distill_loss(depth_branch, frozen_rgb_branch, (teacher_x, student_x))])
    if heldout is not None:
        result.heldout_curve.append(distill_loss(depth_branch, frozen_rgb_branch, heldout))
    n = student_x.shape[0]
    student_mode = depth_branch.layers()[0].training
    _set_mode(depth_branch, False)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = np.sort(order[lo:lo + batch_size])
            opt.zero_grad()
            feats = depth_branch(Tensor(student_x[idx], dtype=params[0].dtype))[-1]
            loss = F.mse(feats, Tensor(targets[idx], dtype=feats.dtype))
            if not np.isfinite(loss.data):
                raise FloatingPointError("distillation loss became non-finite")
            loss.backward()
            opt.step()
        result.loss_curve.append(distill_loss(depth_branch, frozen_rgb_branch, (teacher_x, student_x)))
        if heldout is not None:
            result.heldout_curve.append(distill_loss(depth_branch, frozen_rgb_branch, heldout))
    _set_mode(depth_branch, student_mode)
    return result


# ---------------------------------------------------------------------- description


def describe(model: Optional[DednModel]) -> str:
    """Textual architecture summary: stages, channels, parameter counts."""
    if model is None or not model.named_layers():
        raise ValueError("cannot describe an empty model")
    cfg = model.config
    lines = [
        f"DEDN {cfg.height}x{cfg.width}, views={cfg.n_views}, head={cfg.head}",
        f"encoder levels (stem + stages): {list(cfg.levels)}, residual blocks/stage: {cfg.blocks_per_stage}",
    ]
    groups: dict[str, int] = {}
    for layer in model.named_layers():
        key = ".".join(layer.name.split(".")[:2])
        groups[key] = groups.get(key, 0) + layer.spec.param_count()
    for key, n in groups.items():
        lines.append(f"  {key:<28s} {n:>10d}")
    fusion = sum(l.spec.param_count() for l in model.fusion.layers) if model.fusion is not None else 0
    total = sum(l.spec.param_count() for l in model.named_layers())
    lines.append(f"fusion parameters: {fusion}")
    lines.append(f"parameters excluding fusion: {total - fusion}")
    lines.append(f"total parameters: {total}")
    return "\n".join(lines)
