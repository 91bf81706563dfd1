"""Depth/RGB rasters, PNG I/O, and a synthetic RGB-D scene generator.

Synthetic scenes are piecewise planar over a random Voronoi partition. A
"predicted" depth map is produced by corrupting the ground truth with a
sequence of error models that stand in for a real monocular predictor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

DEPTH_FLOOR = 0.05
MAX_DIMENSION = 8192
CORRUPTION_KINDS = ("global_bias", "region_offset", "boundary_erosion", "smooth_noise", "holes")


class RasterFormatError(ValueError):
    """A raster file could not be parsed or does not follow the PNG conventions."""


@dataclass
class DepthRaster:
    """Metric depth in meters with a validity mask; invalid pixels hold 0.0."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.ndim != 2 or self.depth.shape != self.valid.shape:
            raise ValueError(f"depth {self.depth.shape} and valid {self.valid.shape} must be matching 2-D arrays")
        if np.any(self.depth[self.valid] <= 0) or not np.all(np.isfinite(self.depth[self.valid])):
            raise ValueError("valid depths must be finite and > 0")
        self.depth = np.where(self.valid, self.depth, 0.0)

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "DepthRaster":
        """Treat zeros (and non-finite values) as missing."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "DepthRaster":
        return DepthRaster(self.depth.copy(), self.valid.copy())


@dataclass
class RgbImage:
    """H x W x 3 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"RGB data must be H x W x 3, got {self.data.shape}")
        if self.data.min(initial=0.0) < 0 or self.data.max(initial=0.0) > 1:
            raise ValueError("RGB intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CorruptionModel:
    """One error model applied to ground-truth depth.

    ``magnitude`` is in meters. Kind-specific knobs: ``sign`` (global_bias),
    ``appearance_weight`` (region_offset), ``radius`` and ``edge_threshold``
    (boundary_erosion), ``scale`` in pixels (smooth_noise), ``fraction``
    (holes). ``seed`` overrides the per-model seed derived in :func:`corrupt`.
    """

    kind: str
    magnitude: float = 0.0
    seed: Optional[int] = None
    sign: float = 1.0
    appearance_weight: float = 0.7
    radius: int = 2
    edge_threshold: float = 0.15
    scale: float = 8.0
    fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("corruption magnitude must be >= 0")
        if self.sign not in (1.0, -1.0, 1, -1):
            raise ValueError("sign must be +1 or -1")
        if not 0 <= self.appearance_weight <= 1:
            raise ValueError("appearance_weight must be in [0, 1]")
        if self.radius < 1 or self.scale <= 0 or self.edge_threshold <= 0:
            raise ValueError("radius, scale and edge_threshold must be positive")
        if not 0 <= self.fraction < 1:
            raise ValueError("hole fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionModel":
        return cls(**d)


def default_corruption() -> tuple[CorruptionModel, ...]:
    return (
        CorruptionModel("region_offset", magnitude=0.5),
        CorruptionModel("boundary_erosion", magnitude=1.0, radius=2),
    )


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_regions: int = 8
    depth_min: float = 0.5
    depth_max: float = 10.0
    multi_view: bool = False
    baseline_frac: float = 0.05
    texture_noise: float = 0.02
    gt_hole_fraction: float = 0.0
    corruption: tuple[CorruptionModel, ...] = field(default_factory=default_corruption)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")
        if self.width > MAX_DIMENSION or self.height > MAX_DIMENSION:
            raise ValueError("resolution too large")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if not 0 <= self.gt_hole_fraction < 1:
            raise ValueError("gt_hole_fraction must be in [0, 1)")
        if self.baseline_frac < 0 or self.texture_noise < 0:
            raise ValueError("baseline_frac and texture_noise must be >= 0")


@dataclass
class View:
    rgb: RgbImage
    gt_depth: DepthRaster
    pred_depth: DepthRaster
    regions: Optional[np.ndarray] = None


@dataclass
class SceneSample:
    rgb: RgbImage
    gt_depth: DepthRaster
    pred_depth: DepthRaster
    corruption_descriptor: dict
    second: Optional[View] = None
    regions: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.gt_depth.depth.shape
        rasters = [self.rgb.data.shape[:2], self.pred_depth.depth.shape]
        if self.second is not None:
            rasters += [
                self.second.rgb.data.shape[:2],
                self.second.gt_depth.depth.shape,
                self.second.pred_depth.depth.shape,
            ]
        if any(s != shape for s in rasters):
            raise ValueError("all rasters of a sample must share dimensions")

    @property
    def multi_view(self) -> bool:
        return self.second is not None

    def views(self, n_views: int = 1) -> list[tuple[RgbImage, DepthRaster]]:
        """(rgb, predicted depth) pairs in the order a detector consumes them."""
        out = [(self.rgb, self.pred_depth)]
        if n_views >= 2:
            if self.second is None:
                raise ValueError("sample has no second view")
            out.append((self.second.rgb, self.second.pred_depth))
        return out


# --------------------------------------------------------------------------
# scene synthesis


@dataclass
class _Scene:
    sites: np.ndarray  # (R, 2) in pixel coordinates
    planes: np.ndarray  # (R, 3): depth = a + b*u + c*v
    albedo: np.ndarray  # (R, 3)
    shade: np.ndarray  # (R,)
    width: int
    height: int

    def _uv(self, x, y):
        return (x - self.width / 2) / (self.width / 2), (y - self.height / 2) / (self.height / 2)

    def region_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        d2 = (x[..., None] - self.sites[:, 0]) ** 2 + (y[..., None] - self.sites[:, 1]) ** 2
        return np.argmin(d2, axis=-1)

    def depth_at(self, x: np.ndarray, y: np.ndarray, region: np.ndarray) -> np.ndarray:
        u, v = self._uv(x, y)
        p = self.planes[region]
        return p[..., 0] + p[..., 1] * u + p[..., 2] * v


def _make_scene(cfg: SceneConfig, rng: np.random.Generator) -> _Scene:
    w, h = cfg.width, cfg.height
    margin = cfg.baseline_frac * w / cfg.depth_min + 1.0
    umax = 1.0 + 2.0 * margin / w
    r = cfg.n_regions
    sites = np.column_stack([rng.uniform(-margin, w + margin, r), rng.uniform(0, h, r)])
    lo, hi = cfg.depth_min, cfg.depth_max
    a = np.exp(rng.uniform(np.log(lo + 0.1 * (hi - lo)), np.log(hi - 0.2 * (hi - lo)), r))
    budget = np.minimum(a - lo, hi - a) * rng.uniform(0.0, 0.5, r)
    split = rng.uniform(0, 1, r)
    b = budget * split / umax * rng.choice([-1.0, 1.0], r)
    c = budget * (1 - split) * rng.choice([-1.0, 1.0], r)
    planes = np.column_stack([a, b, c])
    albedo = rng.uniform(0.15, 0.95, size=(r, 3))
    # Lambertian shading of each plane's surface normal (slopes in m per image half-width)
    normals = np.column_stack([-b, -c, np.full(r, 2.0)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    light = np.array([0.3, -0.5, 1.0])
    light /= np.linalg.norm(light)
    shade = 0.35 + 0.65 * np.clip(normals @ light, 0, 1)
    return _Scene(sites, planes, albedo, shade, w, h)


def _render_view1(scene: _Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64) + 0.5
    region = scene.region_at(xs, ys)
    depth = scene.depth_at(xs, ys, region)
    color = scene.albedo[region] * scene.shade[region][..., None]
    return depth, region, color


def _render_view2(scene: _Scene, cfg: SceneConfig, supersample: int = 4):
    """Forward-splat the scene into a camera translated along +x with a z-buffer.

    A point at depth d moves left by ``baseline_frac * width / d`` pixels.
    Pixels that receive no sample are disocclusions: invalid depth, color
    and region filled from the nearest covered pixel.
    """
    w, h = scene.width, scene.height
    shift_max = cfg.baseline_frac * w / cfg.depth_min
    xs = np.arange(0, (w + shift_max + 1) * supersample) / supersample + 0.5 / supersample
    ys = np.arange(h) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    region = scene.region_at(gx, gy)
    depth = scene.depth_at(gx, gy, region)
    tx = np.floor(gx - cfg.baseline_frac * w / depth).astype(np.int64)
    ty = np.floor(gy).astype(np.int64)
    inside = (tx >= 0) & (tx < w)
    flat = (ty * w + tx)[inside]
    d_in, r_in = depth[inside], region[inside]
    order = np.lexsort((d_in, flat))
    flat, d_in, r_in = flat[order], d_in[order], r_in[order]
    first = np.unique(flat, return_index=True)[1]
    depth2 = np.zeros(h * w)
    region2 = np.full(h * w, -1)
    depth2[flat[first]] = d_in[first]
    region2[flat[first]] = r_in[first]
    depth2 = depth2.reshape(h, w)
    region2 = region2.reshape(h, w)
    covered = region2 >= 0
    if not covered.all():
        idx = ndimage.distance_transform_edt(~covered, return_distances=False, return_indices=True)
        region2 = region2[idx[0], idx[1]]
    color = scene.albedo[region2] * scene.shade[region2][..., None]
    return depth2, covered, region2, color


def _finish_rgb(color: np.ndarray, noise: float, rng: np.random.Generator) -> RgbImage:
    if noise > 0:
        color = color + rng.normal(0.0, noise, color.shape)
    return RgbImage(np.clip(color, 0.0, 1.0))


def _gt_holes(valid: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction <= 0:
        return valid
    return valid & ~_blob_mask(valid, fraction, rng, sigma=1.5)


def generate_scene(config: SceneConfig, seed: int) -> SceneSample:
    """Deterministically synthesize one (rgb, ground truth, prediction) sample."""
    rng = np.random.default_rng([seed, 0])
    scene = _make_scene(config, rng)
    depth, region, color = _render_view1(scene)
    rgb = _finish_rgb(color, config.texture_noise, rng)
    valid = _gt_holes(np.ones(depth.shape, bool), config.gt_hole_fraction, rng)
    gt = DepthRaster(np.where(valid, depth, 0.0), valid)
    pred = corrupt(gt, list(config.corruption), seed=seed * 2 + 1, regions=region, rgb=rgb)

    second = None
    if config.multi_view:
        depth2, covered, region2, color2 = _render_view2(scene, config)
        rgb2 = _finish_rgb(color2, config.texture_noise, rng)
        valid2 = _gt_holes(covered, config.gt_hole_fraction, rng)
        gt2 = DepthRaster(np.where(valid2, depth2, 0.0), valid2)
        pred2 = corrupt(gt2, list(config.corruption), seed=seed * 2 + 2, regions=region2, rgb=rgb2)
        second = View(rgb2, gt2, pred2, region2)

    descriptor = {
        "seed": seed,
        "order": [m.kind for m in config.corruption],
        "models": [m.to_dict() for m in config.corruption],
    }
    return SceneSample(rgb, gt, pred, descriptor, second, region)


# --------------------------------------------------------------------------
# corruption


def _blob_mask(valid: np.ndarray, fraction: float, rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    """Blob-shaped subset of ``valid`` covering ``fraction`` of its pixels."""
    field_ = ndimage.gaussian_filter(rng.standard_normal(valid.shape), sigma)
    n_valid = int(valid.sum())
    k = int(round(fraction * n_valid))
    mask = np.zeros(valid.shape, bool)
    if k == 0:
        return mask
    scores = np.where(valid, field_, -np.inf).ravel()
    top = np.argpartition(-scores, k - 1)[:k]
    mask.ravel()[top] = True
    return mask


def _segment_planar(gt: DepthRaster, edge_threshold: float) -> np.ndarray:
    """Fallback region map: connected components between depth discontinuities."""
    edges = _discontinuities(gt, edge_threshold)
    inner = gt.valid & ~edges
    labels, n = ndimage.label(inner)
    if n == 0:
        return np.zeros(gt.depth.shape, int)
    idx = ndimage.distance_transform_edt(labels == 0, return_distances=False, return_indices=True)
    return labels[idx[0], idx[1]] - 1


def _discontinuities(gt: DepthRaster, threshold: float) -> np.ndarray:
    """Pixels adjacent to a jump larger than ``threshold`` between valid neighbours."""
    d, v = gt.depth, gt.valid
    edges = np.zeros(d.shape, bool)
    jump_x = (np.abs(np.diff(d, axis=1)) > threshold) & v[:, 1:] & v[:, :-1]
    jump_y = (np.abs(np.diff(d, axis=0)) > threshold) & v[1:, :] & v[:-1, :]
    edges[:, 1:] |= jump_x
    edges[:, :-1] |= jump_x
    edges[1:, :] |= jump_y
    edges[:-1, :] |= jump_y
    return edges


def appearance_score(rgb: np.ndarray) -> np.ndarray:
    """Shading-invariant red/blue balance in [-1, 1]."""
    r, b = rgb[..., 0], rgb[..., 2]
    return np.clip(1.5 * (r - b) / (r + b + 1e-6), -1.0, 1.0)


def _apply(model: CorruptionModel, d: np.ndarray, valid: np.ndarray, gt: DepthRaster,
           rng: np.random.Generator, regions, rgb) -> tuple[np.ndarray, np.ndarray]:
    kind = model.kind
    if kind == "global_bias":
        return d + model.sign * model.magnitude, valid
    if kind == "region_offset":
        if regions is None:
            regions = _segment_planar(gt, model.edge_threshold)
        regions = np.asarray(regions)
        ids = np.unique(regions)
        jitter = dict(zip(ids.tolist(), rng.uniform(-1.0, 1.0, ids.size)))
        offset = np.zeros(d.shape)
        for rid in ids:
            sel = regions == rid
            if rgb is not None:
                z = float(np.mean(appearance_score(rgb.data[sel])))
                score = model.appearance_weight * z + (1 - model.appearance_weight) * jitter[rid]
            else:
                score = jitter[rid]
            offset[sel] = model.magnitude * score
        return d + offset, valid
    if kind == "boundary_erosion":
        edges = _discontinuities(gt, model.edge_threshold)
        size = 2 * model.radius + 1
        band = ndimage.binary_dilation(edges, structure=np.ones((size, size), bool))
        w = valid.astype(np.float64)
        num = ndimage.uniform_filter(d * w, size=size, mode="nearest")
        den = ndimage.uniform_filter(w, size=size, mode="nearest")
        blurred = np.where(den > 0, num / np.maximum(den, 1e-12), d)
        change = np.clip(blurred - d, -model.magnitude, model.magnitude)
        return np.where(band & valid, d + change, d), valid
    if kind == "smooth_noise":
        noise = ndimage.gaussian_filter(rng.standard_normal(d.shape), model.scale)
        std = noise.std()
        if std > 0:
            noise = noise / std
        return d + model.magnitude * noise, valid
    # holes
    return d, valid & ~_blob_mask(valid, model.fraction, rng)


def corrupt(
    gt: DepthRaster,
    models: Sequence[CorruptionModel],
    seed: int,
    regions: Optional[np.ndarray] = None,
    rgb: Optional[RgbImage] = None,
) -> DepthRaster:
    """Apply ``models`` in order to ``gt`` and return the simulated prediction.

    ``regions`` (an integer map) drives region_offset; without it regions are
    segmented from the ground-truth discontinuities. With ``rgb`` the
    region offsets depend partly on region appearance, which is what makes
    them detectable from the image. Invalid pixels never become valid, and
    valid depths are clamped to at least DEPTH_FLOOR.
    """
    if not models:
        raise ValueError("corrupt needs at least one corruption model")
    d = gt.depth.copy()
    valid = gt.valid.copy()
    for i, model in enumerate(models):
        rng = np.random.default_rng(model.seed if model.seed is not None else [seed, i])
        d, valid = _apply(model, d, valid, gt, rng, regions, rgb)
    valid = valid & gt.valid
    d = np.where(valid, np.maximum(d, DEPTH_FLOOR), 0.0)
    return DepthRaster(d, valid)


# --------------------------------------------------------------------------
# raster I/O

_U16_MAX = 65535


def write_raster(raster: Union[DepthRaster, RgbImage], path: Union[str, Path]) -> None:
    """Depth: 16-bit grayscale PNG in millimeters, 0 = invalid. RGB: 8-bit PNG."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise RasterFormatError(f"unknown format tag {path.suffix!r}; only .png is supported")
    if isinstance(raster, DepthRaster):
        mm = np.rint(raster.depth * 1000.0)
        if np.any(mm[raster.valid] > _U16_MAX):
            raise RasterFormatError("depth exceeds 65.535 m, not representable in 16-bit millimeters")
        if np.any(mm[raster.valid] < 1):
            raise RasterFormatError("valid depth below 0.5 mm would be stored as invalid")
        img = Image.fromarray(np.where(raster.valid, mm, 0).astype(np.uint16))
    elif isinstance(raster, RgbImage):
        img = Image.fromarray(np.rint(raster.data * 255.0).astype(np.uint8), mode="RGB")
    else:
        raise TypeError(f"cannot write {type(raster).__name__}")
    img.save(path, format="PNG")


def read_raster(path: Union[str, Path]) -> Union[DepthRaster, RgbImage]:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise RasterFormatError(f"unknown format tag {path.suffix!r}; only .png is supported")
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise RasterFormatError(f"{path}: not a PNG file")
            w, h = img.size
            if w > MAX_DIMENSION or h > MAX_DIMENSION:
                raise RasterFormatError(f"{path}: dimension overflow ({w}x{h})")
            img.load()
            mode = img.mode
            arr = np.array(img)
    except RasterFormatError:
        raise
    except (OSError, SyntaxError, ValueError, Image.DecompressionBombError) as exc:
        raise RasterFormatError(f"{path}: malformed PNG ({exc})") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        mm = arr.astype(np.int64)
        if mm.min() < 0 or mm.max() > _U16_MAX:
            raise RasterFormatError(f"{path}: depth values outside 16-bit range")
        valid = mm > 0
        return DepthRaster(mm / 1000.0, valid)
    if mode == "RGB":
        return RgbImage(arr.astype(np.float64) / 255.0)
    raise RasterFormatError(f"{path}: unsupported PNG mode {mode!r}")


# --------------------------------------------------------------------------
# manifests

_VIEW_FILES = ("rgb", "gt_depth", "pred_depth")


def save_sample(sample: SceneSample, directory: Union[str, Path], sample_id: str) -> dict:
    """Write a sample's rasters as PNGs and return its manifest record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {"id": sample_id}
    for key, raster in zip(_VIEW_FILES, (sample.rgb, sample.gt_depth, sample.pred_depth)):
        name = f"{sample_id}_{key}.png"
        write_raster(raster, directory / name)
        record[key] = name
    if sample.second is not None:
        s = sample.second
        for key, raster in zip(_VIEW_FILES, (s.rgb, s.gt_depth, s.pred_depth)):
            name = f"{sample_id}_{key}2.png"
            write_raster(raster, directory / name)
            record[f"{key}2"] = name
    record["corruption"] = sample.corruption_descriptor
    return record


def write_manifest(records: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: Union[str, Path]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RasterFormatError(f"{path}:{lineno}: malformed manifest record") from exc
    return records


def load_sample(record: dict, directory: Union[str, Path]) -> SceneSample:
    directory = Path(directory)
    rasters = [read_raster(directory / record[k]) for k in _VIEW_FILES]
    second = None
    if "rgb2" in record:
        second = View(*[read_raster(directory / record[f"{k}2"]) for k in _VIEW_FILES])
    return SceneSample(rasters[0], rasters[1], rasters[2], record.get("corruption", {}), second)
