"""Multi-scale whole-volume inference, post-processing and overlap metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .exceptions import ParameterError, ShapeError
from .synth import PatchSpec, tile_origins
from .unet import Network
from .volume import Mask, Volume, largest_component, resample_array, resize_array

BASE_SCALES = (0.0375, 0.0625, 0.125, 0.1875, 0.25)
FINETUNED_SCALES = (0.075, 0.125, 0.25, 0.375, 0.5)
PRESETS = {"base": BASE_SCALES, "finetuned": FINETUNED_SCALES}


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple = BASE_SCALES

    def __post_init__(self):
        s = tuple(sorted(float(v) for v in self.scales))
        if not s:
            raise ParameterError("scale set must not be empty")
        if not all(0 < v <= 1 for v in s):
            raise ParameterError(f"scales must lie in (0, 1], got {s}")
        object.__setattr__(self, "scales", s)

    @classmethod
    def parse(cls, text: Union[str, Sequence[float], "ScaleSet"]) -> "ScaleSet":
        """Accept a preset name, a comma-separated list or a sequence."""
        if isinstance(text, ScaleSet):
            return text
        if isinstance(text, str):
            if text in PRESETS:
                return cls(PRESETS[text])
            try:
                return cls(tuple(float(v) for v in text.split(",") if v.strip()))
            except ValueError:
                raise ParameterError(f"cannot parse scale set {text!r}") from None
        return cls(tuple(text))


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.5
    connectivity: int = 26
    boundary_crop_vox: int = 0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ParameterError("threshold must lie in (0, 1)")
        if self.connectivity not in (6, 26):
            raise ParameterError("connectivity must be 6 or 26")
        if self.boundary_crop_vox < 0:
            raise ParameterError("boundary crop must be non-negative")


def _normalize(v: Union[Volume, np.ndarray]) -> np.ndarray:
    if isinstance(v, Volume):
        return v.values.astype(np.float32) / np.float32(v.kind_max)
    return np.asarray(v, dtype=np.float32)


def predict_volume(net: Network, v: Union[Volume, np.ndarray], tile: PatchSpec = PatchSpec(64)) -> np.ndarray:
    """Probability grid for a volume, tiled with max merging over overlaps.

    Volumes shorter than the tile along an axis are reflect-padded up to the
    tile size and cropped back afterwards.
    """
    p = tile.patch_size
    if p % net.config.divisor:
        raise ShapeError(f"tile size {p} not divisible by {net.config.divisor}")
    x = _normalize(v)
    dims = x.shape
    pad = [(0, max(0, p - n)) for n in dims]
    if any(b for _, b in pad):
        x = np.pad(x, pad, mode="reflect" if min(dims) > 1 else "edge")
    origins = [tile_origins(n, p, tile.stride) for n in x.shape]
    tiles = [(a, b, c) for a in origins[0] for b in origins[1] for c in origins[2]]
    return _merge_tiles(lambda patch: net.forward(patch[None, None])[0, 0], x, tiles, p)[
        : dims[0], : dims[1], : dims[2]]


def _merge_tiles(forward, x: np.ndarray, tiles, p: int) -> np.ndarray:
    out = np.zeros(x.shape, dtype=np.float32)
    for o in tiles:
        sl = tuple(slice(a, a + p) for a in o)
        np.maximum(out[sl], forward(x[sl]), out=out[sl])
    return out


def multiscale_predict(net: Network, v: Union[Volume, np.ndarray], scales: ScaleSet = ScaleSet(),
                       tile: PatchSpec = PatchSpec(64), return_per_scale: bool = False):
    """Voxelwise maximum of per-scale predictions restored to full size.

    Each scale downsamples trilinearly, predicts, and upsamples the
    probabilities with clamped natural cubic splines.
    """
    x = _normalize(v)
    dims = x.shape
    fused = np.zeros(dims, dtype=np.float32)
    per_scale = {}
    for s in dict.fromkeys(ScaleSet.parse(scales).scales):
        small = x if s == 1 else resample_array(x, s, "trilinear").astype(np.float32)
        prob = predict_volume(net, small, tile)
        full = prob if prob.shape == dims else resize_array(prob, dims, "cubic-spline")
        full = np.clip(full, 0, 1).astype(np.float32)
        np.maximum(fused, full, out=fused)
        if return_per_scale:
            per_scale[s] = full
    return (fused, per_scale) if return_per_scale else fused


def binarize(prob, config: PostprocessConfig = PostprocessConfig()) -> Mask:
    """Crack where ``prob >= threshold``."""
    return Mask(np.asarray(prob) >= config.threshold)


def crop_boundary(m: Mask, width: int) -> Mask:
    """Clear a shell of ``width`` voxels along every face."""
    if width == 0:
        return m
    if 2 * width >= min(m.dims):
        raise ParameterError(f"boundary crop {width} too large for dims {m.dims}")
    bits = np.zeros(m.dims, dtype=bool)
    inner = tuple(slice(width, n - width) for n in m.dims)
    bits[inner] = m.bits[inner]
    return Mask(bits)


def postprocess(m: Mask, config: PostprocessConfig = PostprocessConfig()) -> Mask:
    return largest_component(crop_boundary(m, config.boundary_crop_vox), config.connectivity)


def segment(net: Network, v, scales: ScaleSet = ScaleSet(), tile: PatchSpec = PatchSpec(64),
            config: PostprocessConfig = PostprocessConfig()) -> Mask:
    """Full pipeline: multi-scale probabilities -> threshold -> crop -> LCC."""
    return postprocess(binarize(multiscale_predict(net, v, scales, tile), config), config)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    dice: float

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k)!r}\n"
                       for k in ("tp", "fp", "fn", "tn", "precision", "recall", "dice"))


def evaluate(pred: Mask, truth: Mask) -> MetricsReport:
    if pred.dims != truth.dims:
        raise ShapeError(f"prediction dims {pred.dims} != truth dims {truth.dims}")
    p, t = pred.bits, truth.bits
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    truth_empty = tp + fn == 0
    pred_empty = tp + fp == 0
    if pred_empty:
        precision = 1.0 if truth_empty else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if truth_empty else tp / (tp + fn)
    denom = 2 * tp + fp + fn
    dice = 1.0 if denom == 0 else 2 * tp / denom
    return MetricsReport(tp, fp, fn, tn, precision, recall, dice)
