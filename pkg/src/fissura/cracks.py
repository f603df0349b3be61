"""Crack geometry: fractional Brownian height fields turned into voxel surfaces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import ParameterError, ShapeError
from .volume import Mask, dilate_to_width, resize_array

PLANES = {"xy": 2, "xz": 1, "yz": 0}  # base plane -> normal axis


@dataclass(frozen=True)
class FbmParams:
    grid_n: int = 128
    hurst: float = 0.5
    amplitude_vox: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.hurst < 1:
            raise ParameterError(f"hurst must lie in (0, 1), got {self.hurst}")
        if self.grid_n < 2:
            raise ParameterError("grid_n must be >= 2")
        if not self.amplitude_vox > 0:
            raise ParameterError("amplitude_vox must be positive")


def _embedded_covariance(r, alpha, R):
    """Intrinsic embedding of ``-r**alpha`` on ``[0, R]^2`` (Stein 2002)."""
    if alpha <= 1.5:
        beta, c2 = 0.0, alpha / 2
        c0 = 1 - alpha / 2
    else:
        beta = alpha * (2 - alpha) / (3 * R * (R**2 - 1))
        c2 = (alpha - beta * (R - 1) ** 2 * (R + 2)) / 2
        c0 = beta * (R - 1) ** 3 + 1 - c2
    out = np.zeros_like(r)
    near = r <= 1
    out[near] = c0 - r[near] ** alpha + c2 * r[near] ** 2
    mid = (r > 1) & (r <= R)
    out[mid] = beta * (R - r[mid]) ** 3 / r[mid]
    return out, c2


def fbm_field(n: int, hurst: float, rng: np.random.Generator) -> np.ndarray:
    """Exact sample of a 2D fractional Brownian field on an ``n x n`` grid.

    Circulant embedding of the intrinsic stationary covariance on ``[0, 2]^2``;
    the returned square of side ``1/sqrt(2)`` lies inside the unit quarter
    disc where the embedding is exact. Unscaled, ``B(0) = 0``.
    """
    R = 2.0
    alpha = 2.0 * hurst
    h = 1.0 / (np.sqrt(2.0) * (n - 1))
    m = int(np.ceil(R / h)) + 1
    t = np.arange(m) * h
    r = np.sqrt(t[:, None] ** 2 + t[None, :] ** 2)
    rows, c2 = _embedded_covariance(r, alpha, R)
    # even extension to a (2m-2)^2 block-circulant base
    circ = np.concatenate([rows, rows[:, -2:0:-1]], axis=1)
    circ = np.concatenate([circ, circ[-2:0:-1, :]], axis=0)
    lam = np.fft.fft2(circ).real / circ.size
    lam = np.sqrt(np.clip(lam, 0, None))
    z = rng.standard_normal(circ.shape) + 1j * rng.standard_normal(circ.shape)
    f = np.fft.fft2(lam * z).real[:n, :n]
    f = f - f[0, 0]
    # the c2 r^2 term of the embedding is restored by a random linear field
    g = rng.standard_normal(2)
    x = np.arange(n) * h
    f += np.sqrt(2 * c2) * (g[0] * x[:, None] + g[1] * x[None, :])
    return f


def gen_fbm_field(p: FbmParams) -> np.ndarray:
    """Height field in voxels: fBm pinned to 0 at the origin, std = amplitude."""
    rng = np.random.default_rng(p.seed)
    f = fbm_field(p.grid_n, p.hurst, rng)
    sd = f.std()
    if sd > 0:
        f = f * (p.amplitude_vox / sd)
    return f


@dataclass(frozen=True)
class Orientation:
    """Base plane, tilt in degrees (shear along the first in-plane axis) and
    the plane's offset along its normal (``None`` = centre)."""

    plane: str = "xy"
    tilt_deg: float = 0.0
    offset: Optional[float] = None

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ParameterError(f"plane must be one of {sorted(PLANES)}, got {self.plane!r}")
        if not -60 <= self.tilt_deg <= 60:
            raise ParameterError("tilt must lie in [-60, 60] degrees")

    @property
    def normal_axis(self) -> int:
        return PLANES[self.plane]


def _plane_axes(normal: int) -> tuple[int, int]:
    return tuple(a for a in range(3) if a != normal)


def voxelize_surface(field: np.ndarray, orientation: Orientation, dims) -> Mask:
    """One voxel per base-plane column at ``round(centre + height)``, clamped.

    ``field`` is resampled to the base-plane extent when its shape differs.
    Rounding is half-up.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"dims must be three positive integers, got {dims}")
    normal = orientation.normal_axis
    u_ax, v_ax = _plane_axes(normal)
    nu, nv = dims[u_ax], dims[v_ax]
    f = np.asarray(field, dtype=np.float64)
    if f.shape != (nu, nv):
        f = _resize_2d(f, (nu, nv))
    u = np.arange(nu, dtype=np.float64)[:, None]
    heights = f + np.tan(np.radians(orientation.tilt_deg)) * (u - (nu - 1) / 2)
    centre = dims[normal] / 2 if orientation.offset is None else orientation.offset
    idx = np.clip(np.floor(centre + heights + 0.5), 0, dims[normal] - 1).astype(np.intp)
    bits = np.zeros(dims, dtype=bool)
    uu, vv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    index = [None, None, None]
    index[u_ax], index[v_ax], index[normal] = uu, vv, idx
    bits[tuple(index)] = True
    return Mask(bits)


def _resize_2d(f: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with corner alignment so the origin node stays put."""
    out = f
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        pos = np.linspace(0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = pos - i0
        wshape = [1, 1]
        wshape[axis] = n_out
        w = w.reshape(wshape)
        out = np.take(out, i0, axis=axis) * (1 - w) + np.take(out, i1, axis=axis) * w
    return out


VARYING = "varying"
WidthSpec = Union[int, str]


@dataclass(frozen=True)
class CrackSpec:
    """Scene description: one or two cracks with widths and orientations.

    ``widths`` holds per crack either a constant in {1, 3, 5} (other odd
    constants are allowed for evaluation scenes) or ``"varying"`` for a
    smooth width profile in ``[1, 13]``.
    """

    count: int = 1
    widths: tuple = (1,)
    orientations: tuple = (Orientation(),)
    coplanar: bool = False
    seed: int = 0
    hurst: float = 0.5
    amplitude_vox: Optional[float] = None
    grid_n: int = 128
    varying_range: tuple = (1.0, 13.0)

    def __post_init__(self):
        if self.count not in (1, 2):
            raise ParameterError(f"crack count must be 1 or 2, got {self.count}")
        if len(self.widths) != self.count or len(self.orientations) != self.count:
            raise ParameterError("need one width and one orientation per crack")
        for w in self.widths:
            if w == VARYING:
                continue
            if not (isinstance(w, (int, np.integer)) and w >= 1):
                raise ParameterError(f"constant widths must be integers >= 1, got {w!r}")
        lo, hi = self.varying_range
        if not 1 <= lo <= hi <= 13:
            raise ParameterError("varying width profiles must stay within [1, 13]")
        if self.count == 2:
            same = self.orientations[0].plane == self.orientations[1].plane
            if self.coplanar and not same:
                raise ParameterError("coplanar double cracks need the same base plane")
            if not self.coplanar and same:
                raise ParameterError("non-coplanar double cracks need different base planes")


def default_spec(count: int, width: WidthSpec, coplanar: bool, dims, seed: int,
                 hurst: float = 0.5, amplitude_vox: Optional[float] = None,
                 max_tilt_deg: float = 15.0) -> CrackSpec:
    """Draw planes, tilts and offsets for a scene from ``seed``."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    planes = list(PLANES)
    first = planes[rng.integers(3)]
    tilts = rng.uniform(-max_tilt_deg, max_tilt_deg, size=2)
    if count == 1:
        orients = (Orientation(first, float(tilts[0])),)
    elif coplanar:
        n = dims[PLANES[first]]
        orients = (Orientation(first, float(tilts[0]), n / 3),
                   Orientation(first, float(tilts[1]), 2 * n / 3))
    else:
        second = [p for p in planes if p != first][rng.integers(2)]
        orients = (Orientation(first, float(tilts[0])), Orientation(second, float(tilts[1])))
    return CrackSpec(count=count, widths=(width,) * count, orientations=orients,
                     coplanar=coplanar, seed=seed, hurst=hurst, amplitude_vox=amplitude_vox)


def width_profile(shape, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random width map on a base plane, spanning ``[lo, hi]``."""
    coarse = rng.standard_normal((4, 4))
    fine = _resize_2d(coarse, shape)
    span = fine.max() - fine.min()
    unit = (fine - fine.min()) / span if span > 0 else np.zeros(shape)
    return lo + (hi - lo) * unit


def crack_masks(spec: CrackSpec, dims) -> list[Mask]:
    """Per-crack dilated masks before union."""
    dims = tuple(int(d) for d in dims)
    amplitude = spec.amplitude_vox if spec.amplitude_vox is not None else min(dims) / 16
    masks = []
    for k in range(spec.count):
        seed = int(np.random.default_rng([spec.seed, k]).integers(2**63))
        fbm = FbmParams(spec.grid_n, spec.hurst, amplitude, seed)
        orient = spec.orientations[k]
        surface = voxelize_surface(gen_fbm_field(fbm), orient, dims)
        width = spec.widths[k]
        if width == VARYING:
            normal = orient.normal_axis
            u_ax, v_ax = _plane_axes(normal)
            prof = width_profile((dims[u_ax], dims[v_ax]), *spec.varying_range,
                                 np.random.default_rng([seed, 1]))
            field = np.expand_dims(prof, normal)
            width = np.broadcast_to(field, dims)
        masks.append(dilate_to_width(surface, width))
    return masks


def compose_scene(spec: CrackSpec, dims) -> Mask:
    """Union of the scene's dilated crack surfaces."""
    if min(dims) < 32:
        raise ShapeError(f"scenes need at least 32 voxels per axis, got {tuple(dims)}")
    masks = crack_masks(spec, dims)
    out = masks[0].bits.copy()
    for m in masks[1:]:
        out |= m.bits
    return Mask(out)
