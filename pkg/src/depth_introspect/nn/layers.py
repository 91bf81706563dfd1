"""Layer specifications and the stateful layers built from them."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .tensor import AutodiffError, NonFiniteError, ShapeError, Tensor, default_dtype

KINDS = (
    "conv3x3",
    "residual_block",
    "downsample_stride2",
    "upsample_nearest2x",
    "batchnorm",
    "leaky_relu",
    "sigmoid",
    "softmax_channels",
    "concat_channels",
    "mse_head",
)

_PARAMETRIC = {"conv3x3", "residual_block", "downsample_stride2", "batchnorm"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: Union[int, tuple[int, ...]]
    out_channels: int
    slope: float = 0.01
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "concat_channels":
            if isinstance(self.in_channels, int) or len(self.in_channels) < 2:
                raise ValueError("concat_channels needs a tuple of at least two input widths")
            if sum(self.in_channels) != self.out_channels:
                raise ValueError(
                    f"concat_channels out_channels {self.out_channels} != sum of inputs {sum(self.in_channels)}"
                )
        else:
            if not isinstance(self.in_channels, int) or self.in_channels < 1:
                raise ValueError(f"{self.kind}: in_channels must be a positive int")
            if self.out_channels < 1:
                raise ValueError(f"{self.kind}: out_channels must be positive")
            if self.kind not in ("conv3x3", "downsample_stride2") and self.in_channels != self.out_channels:
                raise ValueError(f"{self.kind} preserves channel count; got {self.in_channels} -> {self.out_channels}")

    @property
    def n_inputs(self) -> int:
        if self.kind == "concat_channels":
            return len(self.in_channels)
        return 2 if self.kind == "mse_head" else 1

    def input_channels(self) -> tuple[int, ...]:
        if self.kind == "concat_channels":
            return tuple(self.in_channels)
        return (self.in_channels,) * self.n_inputs

    def param_count(self) -> int:
        """Trainable scalars (running statistics excluded)."""
        c_in, c_out = (self.in_channels, self.out_channels) if self.kind != "concat_channels" else (0, 0)
        if self.kind in ("conv3x3", "downsample_stride2"):
            return 9 * c_in * c_out + c_out
        if self.kind == "batchnorm":
            return 2 * c_out
        if self.kind == "residual_block":
            return 2 * (9 * c_out * c_out + c_out) + 4 * c_out
        return 0


def _he_conv(rng: np.random.Generator, c_in: int, c_out: int, slope: float) -> np.ndarray:
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * 9 * c_in))
    return rng.normal(0.0, std, size=(c_out, c_in, 3, 3))


class Layer:
    """A LayerSpec plus its parameters and buffers.

    Parameters and buffers are kept in insertion order; that order is the
    serialization order used by checkpoints.
    """

    def __init__(self, spec: LayerSpec, name: str = ""):
        self.spec = spec
        self.name = name or spec.kind
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.training = True

    def _check_inputs(self, inputs: Sequence[Tensor]) -> None:
        spec = self.spec
        if len(inputs) != spec.n_inputs:
            raise ShapeError(self.name, "input count", spec.n_inputs, len(inputs))
        ref = None
        for i, (t, c) in enumerate(zip(inputs, spec.input_channels())):
            if t.data.ndim != 4:
                raise ShapeError(self.name, f"input {i} rank", 4, t.data.ndim)
            if t.shape[1] != c:
                raise ShapeError(self.name, f"input {i} channels", c, t.shape[1])
            if ref is None:
                ref = t.shape
            else:
                for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
                    if t.shape[axis] != ref[axis]:
                        raise ShapeError(self.name, f"input {i} {label}", ref[axis], t.shape[axis])
        if spec.kind == "batchnorm" and self.training:
            n, _, h, w = inputs[0].shape
            if n * h * w < 2:
                raise ShapeError(self.name, "batch*height*width", ">= 2", n * h * w)

    def __call__(self, *inputs: Tensor) -> Tensor:
        self._check_inputs(inputs)
        out = self._forward(*inputs)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"{self.name}: non-finite values in forward output")
        return out

    def _forward(self, *inputs: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params.values()] + list(self.buffers.values())

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        slots = list(self.params.values())
        names = list(self.buffers)
        if len(arrays) != len(slots) + len(names):
            raise ValueError(f"{self.name}: expected {len(slots) + len(names)} arrays, got {len(arrays)}")
        for p, a in zip(slots, arrays):
            if a.shape != p.shape:
                raise ValueError(f"{self.name}: parameter shape {p.shape} vs stored {a.shape}")
            p.data = np.ascontiguousarray(a, dtype=p.dtype)
        for k, a in zip(names, arrays[len(slots):]):
            if a.shape != self.buffers[k].shape:
                raise ValueError(f"{self.name}: buffer {k} shape {self.buffers[k].shape} vs stored {a.shape}")
            self.buffers[k] = np.array(a, dtype=self.buffers[k].dtype)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)


class Conv3x3(Layer):
    stride = 1

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str = ""):
        super().__init__(spec, name)
        dt = default_dtype()
        self.params["weight"] = Tensor(_he_conv(rng, spec.in_channels, spec.out_channels, spec.slope), True, dt)
        self.params["bias"] = Tensor(np.zeros(spec.out_channels), True, dt)

    def _forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.params["weight"], self.params["bias"], stride=self.stride)


class DownsampleStride2(Conv3x3):
    stride = 2


class BatchNorm(Layer):
    def __init__(self, spec: LayerSpec, rng=None, name: str = ""):
        super().__init__(spec, name)
        dt = default_dtype()
        c = spec.out_channels
        self.params["gamma"] = Tensor(np.ones(c), True, dt)
        self.params["beta"] = Tensor(np.zeros(c), True, dt)
        self.buffers["running_mean"] = np.zeros(c, dtype=dt)
        self.buffers["running_var"] = np.ones(c, dtype=dt)

    def _forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.training,
            momentum=self.spec.momentum,
            eps=self.spec.eps,
        )


class ResidualBlock(Layer):
    """conv-bn-leaky-conv-bn, identity shortcut, leaky on the sum."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str = ""):
        super().__init__(spec, name)
        dt = default_dtype()
        c = spec.out_channels
        for i in (1, 2):
            self.params[f"conv{i}.weight"] = Tensor(_he_conv(rng, c, c, spec.slope), True, dt)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(c), True, dt)
            self.params[f"bn{i}.gamma"] = Tensor(np.ones(c), True, dt)
            self.params[f"bn{i}.beta"] = Tensor(np.zeros(c), True, dt)
        for i in (1, 2):
            self.buffers[f"bn{i}.running_mean"] = np.zeros(c, dtype=dt)
            self.buffers[f"bn{i}.running_var"] = np.ones(c, dtype=dt)

    def _bn(self, x: Tensor, i: int) -> Tensor:
        return F.batchnorm(
            x,
            self.params[f"bn{i}.gamma"],
            self.params[f"bn{i}.beta"],
            self.buffers[f"bn{i}.running_mean"],
            self.buffers[f"bn{i}.running_var"],
            self.training,
            momentum=self.spec.momentum,
            eps=self.spec.eps,
        )

    def _forward(self, x: Tensor) -> Tensor:
        p = self.params
        y = F.conv2d(x, p["conv1.weight"], p["conv1.bias"])
        y = F.leaky_relu(self._bn(y, 1), self.spec.slope)
        y = F.conv2d(y, p["conv2.weight"], p["conv2.bias"])
        y = self._bn(y, 2)
        return F.leaky_relu(F.add(x, y), self.spec.slope)


class UpsampleNearest2x(Layer):
    def _forward(self, x: Tensor) -> Tensor:
        return F.upsample_nearest2x(x)


class LeakyReLU(Layer):
    def _forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(x, self.spec.slope)


class Sigmoid(Layer):
    def _forward(self, x: Tensor) -> Tensor:
        return F.sigmoid(x)


class SoftmaxChannels(Layer):
    def _forward(self, x: Tensor) -> Tensor:
        return F.softmax_channels(x)


class ConcatChannels(Layer):
    def _forward(self, *xs: Tensor) -> Tensor:
        return F.concat_channels(xs)


class MseHead(Layer):
    def _forward(self, pred: Tensor, target: Tensor) -> Tensor:
        return F.mse(pred, target)


_CLASSES = {
    "conv3x3": Conv3x3,
    "downsample_stride2": DownsampleStride2,
    "batchnorm": BatchNorm,
    "residual_block": ResidualBlock,
    "upsample_nearest2x": UpsampleNearest2x,
    "leaky_relu": LeakyReLU,
    "sigmoid": Sigmoid,
    "softmax_channels": SoftmaxChannels,
    "concat_channels": ConcatChannels,
    "mse_head": MseHead,
}


def build_layer(spec: LayerSpec, rng: Optional[np.random.Generator] = None, name: str = "") -> Layer:
    cls = _CLASSES[spec.kind]
    if spec.kind in _PARAMETRIC:
        return cls(spec, rng if rng is not None else np.random.default_rng(0), name)
    return cls(spec, name)


def forward(layer: Layer, inputs: Sequence[Tensor]) -> Tensor:
    """Run one layer on a list of inputs, validating the shape contract."""
    return layer(*inputs)


def backward(output: Tensor, output_grad, wrt: Sequence[Tensor] = ()) -> list[Optional[np.ndarray]]:
    """Backpropagate ``output_grad`` and return the gradients of ``wrt``."""
    if output._backward is None:
        raise AutodiffError("backward before forward: output has no recorded graph")
    output.backward(output_grad)
    return [t.grad for t in wrt]


_GRADCHECK_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    errors: "OrderedDict[str, float]"
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        lines.append(f"max={self.max_error:.3e} tol={self.tolerance:g} {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def gradcheck(
    fn: Callable[[], Tensor],
    blocks: Mapping[str, Tensor],
    tolerance: float = 1e-3,
    eps: float = 1e-5,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` is re-evaluated for every perturbation and is reduced to a scalar
    by a fixed random projection of its output. The error of a block is
    max|analytic - numeric| / max(max|analytic|, max|numeric|, floor), i.e.
    relative to the block's gradient scale. The floor (1e-6) keeps blocks whose
    true gradient is identically zero, such as a conv bias feeding batchnorm,
    from dividing round-off by round-off. Requires float64 tensors.
    """
    for name, t in blocks.items():
        if t.dtype != np.float64:
            raise AutodiffError(f"gradcheck needs float64 tensors; block {name} is {t.dtype}")
    errors: "OrderedDict[str, float]" = OrderedDict()
    if not blocks:
        return GradcheckReport(errors, tolerance)

    for t in blocks.values():
        t.requires_grad = True
        t.grad = None
    out = fn()
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in blocks.items()}

    for name, t in blocks.items():
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(fn().data * proj))
            flat[i] = orig - eps
            fm = float(np.sum(fn().data * proj))
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)
        scale = max(np.abs(a).max(), np.abs(numeric).max(), _GRADCHECK_FLOOR)
        errors[name] = float(np.abs(a - numeric).max() / scale)
    return GradcheckReport(errors, tolerance)
