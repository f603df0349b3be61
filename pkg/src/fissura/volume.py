"""Volumetric containers, VVOL1 file IO, resampling and morphology.

Arrays are indexed ``[x, y, z]``. On disk the payload is x-fastest, which is
numpy's Fortran order for that indexing.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .exceptions import BoundsError, FormatError, ParameterError, ShapeError, TruncationError

MAGIC = "VVOL1"
DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}
_DTYPE_TAGS = {np.dtype(np.uint8): "u8", np.dtype(np.uint16): "u16", np.dtype(np.float32): "f32"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """Gray-value grid with isotropic voxel edge length in micrometers."""

    values: np.ndarray
    voxel_size_um: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"Volume needs a 3-d array with positive dims, got shape {v.shape}")
        if v.dtype not in _DTYPE_TAGS:
            raise ParameterError(f"unsupported element kind {v.dtype}; use uint8, uint16 or float32")
        if not self.voxel_size_um > 0:
            raise ParameterError("voxel_size_um must be positive")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "voxel_size_um", float(self.voxel_size_um))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def dtype_tag(self) -> str:
        return _DTYPE_TAGS[self.values.dtype]

    @property
    def kind_max(self) -> float:
        """Largest representable gray value of the element kind (1.0 for reals)."""
        if self.values.dtype == np.float32:
            return 1.0
        return float(np.iinfo(self.values.dtype).max)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.voxel_size_um == other.voxel_size_um
                and self.values.dtype == other.values.dtype
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"Volume(dims={self.dims}, dtype={self.dtype_tag}, voxel_size_um={self.voxel_size_um})"


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary grid; crack voxels are True."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3 or min(b.shape) < 1:
            raise ShapeError(f"Mask needs a 3-d array with positive dims, got shape {b.shape}")
        if b.dtype != bool:
            if not np.isin(b, (0, 1)).all():
                raise ParameterError("mask values must be 0 or 1")
            b = b.astype(bool)
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def to_volume(self, voxel_size_um: float = 1.0) -> Volume:
        return Volume(self.bits.astype(np.uint8), voxel_size_um)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"Mask(dims={self.dims}, count={self.count})"


@dataclass(frozen=True)
class BoxRegion:
    """Half-open box ``[lo, hi)`` in voxel coordinates."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo, hi = tuple(int(v) for v in self.lo), tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ParameterError("BoxRegion needs three lower and three upper bounds")
        if any(v < 0 for v in lo) or any(a >= b for a, b in zip(lo, hi)):
            raise BoundsError(f"invalid region lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def translate(self, offset) -> "BoxRegion":
        return BoxRegion(tuple(a + o for a, o in zip(self.lo, offset)),
                         tuple(b + o for b, o in zip(self.hi, offset)))


# --------------------------------------------------------------------------- IO


def save_volume(v: Union[Volume, Mask], path) -> None:
    """Write a VVOL1 file. Masks are stored as u8 zeros and ones."""
    if isinstance(v, Mask):
        v = v.to_volume()
    nx, ny, nz = v.dims
    header = (f"{MAGIC}\ndims {nx} {ny} {nz}\ndtype {v.dtype_tag}\n"
              f"voxsize_um {v.voxel_size_um!r}\nend\n")
    payload = v.values.astype(DTYPES[v.dtype_tag], copy=False).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


def _read_header(fh, path):
    def line():
        raw = fh.readline()
        if not raw.endswith(b"\n"):
            raise FormatError(f"{path}: truncated VVOL1 header")
        try:
            return raw[:-1].decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: non-ASCII header") from None

    if line() != MAGIC:
        raise FormatError(f"{path}: missing {MAGIC} magic")
    fields = {}
    for key in ("dims", "dtype", "voxsize_um"):
        parts = line().split(" ")
        if parts[0] != key:
            raise FormatError(f"{path}: expected header field {key!r}, found {parts[0]!r}")
        fields[key] = parts[1:]
    if line() != "end":
        raise FormatError(f"{path}: header not terminated by 'end'")
    try:
        dims = tuple(int(d) for d in fields["dims"])
        voxsize = float(fields["voxsize_um"][0])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed dims or voxsize_um") from None
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: dims must be three positive integers")
    tag = fields["dtype"][0] if fields["dtype"] else ""
    if tag not in DTYPES:
        raise FormatError(f"{path}: unknown dtype {tag!r}")
    return dims, tag, voxsize


def load_volume(path) -> Volume:
    """Read a VVOL1 file written by :func:`save_volume`."""
    path = Path(path)
    with open(path, "rb") as fh:
        dims, tag, voxsize = _read_header(fh, path)
        dtype = DTYPES[tag]
        n = dims[0] * dims[1] * dims[2]
        payload = fh.read(n * dtype.itemsize)
    if len(payload) < n * dtype.itemsize:
        raise TruncationError(f"{path}: payload holds {len(payload) // dtype.itemsize} of {n} elements")
    values = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return Volume(values.astype(dtype.newbyteorder("="), copy=False), voxsize)


def load_mask(path) -> Mask:
    v = load_volume(path)
    if v.dtype_tag != "u8":
        raise FormatError(f"{path}: masks must be stored as u8")
    return Mask(v.values)


# --------------------------------------------------------------------------- geometry


def crop(v: Union[Volume, Mask], region: BoxRegion):
    """Extract ``region``; works for volumes and masks."""
    dims = v.dims
    if any(h > d for h, d in zip(region.hi, dims)):
        raise BoundsError(f"region {region} exceeds dims {dims}")
    if isinstance(v, Mask):
        return Mask(v.bits[region.slices()])
    return Volume(v.values[region.slices()], v.voxel_size_um)


def _resampled_dims(shape, scale):
    return tuple(max(1, int(np.floor(scale * n + 0.5))) for n in shape)


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    """Input coordinates of output voxel centres (centre-aligned grids)."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(pos, 0, n_in - 1)


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    pos = _sample_positions(n_in, n_out)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (pos - i0).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - w) + np.take(a, i1, axis=axis) * w


def _spline_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    if n_in == 1:
        return np.repeat(a, n_out, axis=axis)
    spline = CubicSpline(np.arange(n_in, dtype=np.float64), a, axis=axis, bc_type="natural")
    return spline(_sample_positions(n_in, n_out))


def resample_array(a: np.ndarray, scale: float, method: str = "trilinear") -> np.ndarray:
    """Rescale a 3-d float array by ``scale`` per axis."""
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    return resize_array(a, _resampled_dims(a.shape, scale), method)


def resize_array(a: np.ndarray, out_shape, method: str = "trilinear") -> np.ndarray:
    """Resample a 3-d array to ``out_shape``.

    ``cubic-spline`` uses separable natural cubic splines and clamps the
    result to the input's value range.
    """
    if method not in ("trilinear", "cubic-spline"):
        raise ParameterError(f"unknown resampling method {method!r}")
    a = np.asarray(a)
    if tuple(out_shape) == a.shape:
        return a.copy()
    work = a.astype(np.float64)
    step = _linear_axis if method == "trilinear" else _spline_axis
    for axis, n in enumerate(out_shape):
        work = step(work, axis, int(n))
    if method == "cubic-spline":
        work = np.clip(work, a.min(), a.max())
    return work


def resample(v, scale: float, method: str = "trilinear"):
    """Rescale a Volume (cast back to its element kind) or a float grid."""
    if isinstance(v, Volume):
        out = resample_array(v.values, scale, method)
        if v.values.dtype != np.float32:
            if scale == 1:
                return Volume(v.values, v.voxel_size_um)
            info = np.iinfo(v.values.dtype)
            out = np.clip(np.floor(out + 0.5), info.min, info.max)
        return Volume(out.astype(v.values.dtype), v.voxel_size_um / scale)
    out = resample_array(np.asarray(v), scale, method)
    return out.astype(np.asarray(v).dtype, copy=False)


# --------------------------------------------------------------------------- morphology


def _ball_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(np.floor(radius))
    ax = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.sqrt((off**2).sum(axis=1))
    keep = dist <= radius
    return off[keep], dist[keep]


def dilate_to_width(surface: Mask, width_field) -> Mask:
    """Thicken a one-voxel surface to a local diameter of ``width_field`` voxels.

    A voxel is set iff it lies within Euclidean distance ``(w(s) - 1) / 2`` of
    some surface voxel ``s``. ``width_field`` is a scalar or an array of the
    mask's shape (only its values on surface voxels are read).
    """
    bits = surface.bits
    coords = np.argwhere(bits)
    if coords.size == 0:
        return Mask(bits)
    widths = np.asarray(width_field, dtype=np.float64)
    if widths.ndim == 0:
        widths = np.full(len(coords), float(widths))
    else:
        if widths.shape != bits.shape:
            raise ShapeError(f"width field shape {widths.shape} != mask shape {bits.shape}")
        widths = widths[tuple(coords.T)]
    if not np.all(widths >= 1):
        raise ParameterError("crack widths must be >= 1 everywhere on the surface")
    radii = (widths - 1) / 2
    out = bits.copy()
    offsets, dists = _ball_offsets(radii.max())
    shape = np.array(bits.shape)
    for off, d in zip(offsets, dists):
        if d == 0:
            continue
        src = coords[radii >= d] + off
        inside = np.all((src >= 0) & (src < shape), axis=1)
        src = src[inside]
        out[src[:, 0], src[:, 1], src[:, 2]] = True
    return Mask(out)


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component(m: Mask, connectivity: int = 26) -> Mask:
    """Keep the biggest connected component; ties go to the one seen first in scan order."""
    labels, n = ndimage.label(m.bits, structure=connectivity_structure(connectivity))
    if n == 0:
        return Mask(np.zeros(m.dims, dtype=bool))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return Mask(labels == int(np.argmax(sizes)))


# --------------------------------------------------------------------------- slices


def export_slice(v: Union[Volume, Mask], axis: str, index: int, path) -> None:
    """Write one axis-normal slice as a binary PGM (P5, maxval 255).

    u8 grids are written verbatim; u16 and real grids are min-max scaled
    to 0..255 with truncation.
    """
    if isinstance(v, Mask):
        v = Volume(v.bits.astype(np.uint8) * np.uint8(255))
    ax = {"x": 0, "y": 1, "z": 2}.get(axis)
    if ax is None:
        raise ParameterError(f"axis must be x, y or z, got {axis!r}")
    extent = v.dims[ax]
    if not 0 <= index < extent:
        raise BoundsError(f"slice index {index} outside 0..{extent - 1} on axis {axis}")
    plane = np.take(v.values, index, axis=ax)  # (first remaining axis, second)
    if plane.dtype == np.uint8:
        img = plane
    else:
        lo, hi = float(plane.min()), float(plane.max())
        if hi > lo:
            img = np.floor(255.0 * (plane.astype(np.float64) - lo) / (hi - lo))
        else:
            img = np.zeros(plane.shape)
        img = np.clip(img, 0, 255).astype(np.uint8)
    width, height = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="F"))
