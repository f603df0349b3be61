"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import ParameterError, ShapeError
from .volume import Mask, Volume

_GRAY_DTYPES = (np.uint8, np.uint16, np.float32)


def check_volume(v, name: str = "X") -> Volume:
    """Coerce ``v`` to a :class:`Volume`; floats are cast to float32."""
    if isinstance(v, Volume):
        return v
    a = np.asarray(v)
    if a.ndim != 3:
        raise ShapeError(f"{name} must be 3-dimensional, got shape {a.shape}")
    if a.dtype.kind == "f" and a.dtype != np.float32:
        a = a.astype(np.float32)
    if a.dtype.type not in _GRAY_DTYPES:
        raise ParameterError(f"{name} dtype must be uint8, uint16 or float32, got {a.dtype}")
    if a.dtype == np.float32 and not np.all(np.isfinite(a)):
        raise ParameterError(f"{name} contains non-finite values")
    return Volume(a)


def check_mask(m, name: str = "y") -> Mask:
    if isinstance(m, Mask):
        return m
    a = np.asarray(m)
    if a.ndim != 3:
        raise ShapeError(f"{name} must be 3-dimensional, got shape {a.shape}")
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ParameterError(f"{name} must be binary")
    return Mask(a.astype(bool))


def check_volume_list(X, name: str = "X") -> list[Volume]:
    """Accept one volume or a sequence of them."""
    if isinstance(X, Volume) or (isinstance(X, np.ndarray) and X.ndim == 3):
        return [check_volume(X, name)]
    items = [check_volume(v, f"{name}[{i}]") for i, v in enumerate(X)]
    if not items:
        raise ParameterError(f"{name} is empty")
    return items


def check_pairs(X, y) -> tuple[list[Volume], list[Mask]]:
    vols = check_volume_list(X, "X")
    if isinstance(y, Mask) or (isinstance(y, np.ndarray) and y.ndim == 3):
        masks = [check_mask(y)]
    else:
        masks = [check_mask(m, f"y[{i}]") for i, m in enumerate(y)]
    if len(vols) != len(masks):
        raise ShapeError(f"{len(vols)} volumes but {len(masks)} masks")
    for i, (v, m) in enumerate(zip(vols, masks)):
        if v.dims != m.dims:
            raise ShapeError(f"pair {i}: volume dims {v.dims} != mask dims {m.dims}")
    return vols, masks


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_dims(dims: Sequence[int], name: str = "dims") -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"{name} must be three positive integers, got {dims}")
    return dims
