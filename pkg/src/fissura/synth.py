"""Semi-synthetic training data: pore-statistics imprinting and patch tiling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .cracks import VARYING, compose_scene, default_spec
from .exceptions import DataError, EstimationError, FormatError, ParameterError, ShapeError
from .volume import BoxRegion, Mask, Volume, crop, load_mask, load_volume, save_volume

KINDS = ("NC", "HPC", "PPFRC", "SFRC")
MIN_PORE_VOXELS = 1000
_MAX_KNOTS = 65536


@dataclass(frozen=True, eq=False)
class GrayDistribution:
    """Empirical gray-value distribution stored as its sorted quantile table."""

    knots: np.ndarray
    source_count: int

    def __post_init__(self):
        if self.source_count <= 0 or len(self.knots) == 0:
            raise EstimationError("gray distribution needs at least one source voxel")

    @property
    def support(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def cdf(self, u):
        """Inverse CDF: maps ``u`` in [0, 1] to gray values (monotone)."""
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        n = len(self.knots)
        return self.knots[np.minimum((u * n).astype(np.intp), n - 1)]

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "GrayDistribution":
        values = np.sort(np.asarray(values).ravel())
        if values.size == 0:
            raise EstimationError("no pore voxels to estimate a distribution from")
        if values.size > _MAX_KNOTS:
            idx = np.floor((np.arange(_MAX_KNOTS) + 0.5) * values.size / _MAX_KNOTS).astype(np.intp)
            idx[0], idx[-1] = 0, values.size - 1
            knots = values[idx]
        else:
            knots = values
        knots = knots.copy()
        knots.setflags(write=False)
        return cls(knots, int(values.size))


def estimate_pore_distribution(background: Volume, pore_mask: Optional[Mask] = None,
                               min_voxels: int = MIN_PORE_VOXELS) -> GrayDistribution:
    """Gray statistics of the pores of an uncracked background.

    Without ``pore_mask`` pores are the voxels strictly below the Otsu
    threshold of the gray histogram.
    """
    vals = background.values
    if pore_mask is not None:
        if pore_mask.dims != background.dims:
            raise ShapeError(f"pore mask dims {pore_mask.dims} != background dims {background.dims}")
        pores = vals[pore_mask.bits]
    else:
        if vals.min() == vals.max():
            raise EstimationError("background is constant; cannot threshold pores")
        t = threshold_otsu(vals)
        pores = vals[vals < t]
    if pores.size < min_voxels:
        raise EstimationError(f"only {pores.size} pore voxels found, need {min_voxels}; "
                              "supply an explicit pore mask")
    return GrayDistribution.from_samples(pores)


@dataclass(frozen=True, eq=False)
class LabeledVolume:
    gray: Volume
    truth: Mask
    concrete_kind: str = "NC"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gray.dims != self.truth.dims:
            raise ShapeError(f"gray dims {self.gray.dims} != truth dims {self.truth.dims}")
        if self.concrete_kind not in KINDS:
            raise ParameterError(f"concrete kind must be one of {KINDS}")


def imprint_crack(background: Volume, crack: Mask, dist: GrayDistribution, seed: int = 0,
                  concrete_kind: str = "NC", provenance: Optional[dict] = None) -> LabeledVolume:
    """Replace crack voxels by i.i.d. draws from the pore distribution."""
    if background.dims != crack.dims:
        raise ShapeError(f"background dims {background.dims} != crack dims {crack.dims}")
    gray = np.array(background.values)
    n = crack.count
    if n:
        u = np.random.default_rng(seed).random(n)
        gray[crack.bits] = dist.cdf(u).astype(gray.dtype)
    return LabeledVolume(Volume(gray, background.voxel_size_um), crack, concrete_kind,
                         dict(provenance or {}, imprint_seed=seed))


# --------------------------------------------------------------------------- surrogate backgrounds


def surrogate_background(dims, kind: str = "NC", seed: int = 0) -> tuple[Volume, Mask]:
    """Procedural stand-in for an uncracked CT scan and its pore mask.

    Cement matrix with aggregate blobs and dark spherical pores; SFRC adds
    bright straight fibers, PPFRC dark thin ones.
    """
    if kind not in KINDS:
        raise ParameterError(f"concrete kind must be one of {KINDS}")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    matrix, aggregate, pore = {"NC": (150, 175, 45), "HPC": (165, 185, 50),
                               "PPFRC": (150, 170, 45), "SFRC": (110, 125, 40)}[kind]
    noise = rng.standard_normal(dims)
    agg_field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(min(dims) / 16, 1.0))
    agg = agg_field > np.quantile(agg_field, 0.6)
    gray = np.where(agg, float(aggregate), float(matrix)) + 6.0 * noise
    pores = np.zeros(dims, dtype=bool)
    n_pores = max(8, int(np.prod(dims) / 4000))
    for _ in range(n_pores):
        c = rng.uniform(0, dims)
        r = rng.uniform(1.5, max(2.0, min(dims) / 20))
        lo = np.maximum(np.floor(c - r).astype(int), 0)
        hi = np.minimum(np.ceil(c + r).astype(int) + 1, dims)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        gx, gy, gz = np.ogrid[sl]
        pores[sl] |= (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= r * r
    gray[pores] = pore + 8.0 * noise[pores]
    if kind in ("SFRC", "PPFRC"):
        fibers = np.zeros(dims, dtype=bool)
        length = min(dims) / 2
        for _ in range(max(4, int(np.prod(dims) / 20000))):
            p0 = rng.uniform(0, dims)
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            ts = np.linspace(-length / 2, length / 2, int(2 * length))
            pts = np.floor(p0 + ts[:, None] * d + 0.5).astype(int)
            ok = np.all((pts >= 0) & (pts < dims), axis=1)
            fibers[tuple(pts[ok].T)] = True
        if kind == "SFRC":
            fibers = ndimage.binary_dilation(fibers)
            gray[fibers] = 245.0 + 4.0 * noise[fibers]
        else:
            gray[fibers & ~pores] = pore + 25.0 + 6.0 * noise[fibers & ~pores]
    gray = np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8)
    return Volume(gray, 10.0), Mask(pores)


# --------------------------------------------------------------------------- dataset


@dataclass
class TrainingSet:
    volumes: list
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.volumes)

    def save(self, directory) -> None:
        """Write ``imgNN.vvol``/``gtNN.vvol`` pairs plus ``manifest.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = [f"count={len(self.volumes)}"]
        for i, lv in enumerate(self.volumes):
            save_volume(lv.gray, d / f"img{i:02d}.vvol")
            save_volume(lv.truth, d / f"gt{i:02d}.vvol")
            lines.append(f"{i:02d}.kind={lv.concrete_kind}")
            for key in sorted(lv.provenance):
                lines.append(f"{i:02d}.{key}={lv.provenance[key]}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "TrainingSet":
        d = Path(directory)
        manifest = d / "manifest.txt"
        if not manifest.exists():
            raise FormatError(f"{d}: missing manifest.txt")
        entries = {}
        for raw in manifest.read_text().splitlines():
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            key, sep, value = raw.partition("=")
            if not sep:
                raise FormatError(f"{manifest}: bad line {raw!r}")
            entries[key.strip()] = value.strip()
        try:
            count = int(entries["count"])
        except (KeyError, ValueError):
            raise FormatError(f"{manifest}: missing count") from None
        volumes = []
        for i in range(count):
            prefix = f"{i:02d}."
            prov = {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}
            kind = prov.pop("kind", "NC")
            volumes.append(LabeledVolume(load_volume(d / f"img{i:02d}.vvol"),
                                         load_mask(d / f"gt{i:02d}.vvol"), kind, prov))
        return cls(volumes)


def build_dataset(backgrounds: Sequence[Volume], seed: int = 0, size: int = 256,
                  pore_masks: Optional[Sequence[Optional[Mask]]] = None,
                  hurst: float = 0.5, amplitude_vox: Optional[float] = None,
                  surrogate: bool = False) -> TrainingSet:
    """Four backgrounds (NC, HPC, PPFRC, SFRC) -> 24 labeled cubes of ``size``.

    Per kind: single cracks of widths 1, 3, 5 and double cracks of widths
    1, 3, 5; double cracks alternate between coplanar and crossing planes.
    """
    if len(backgrounds) != len(KINDS):
        raise ParameterError(f"need one background per concrete kind {KINDS}")
    pore_masks = list(pore_masks) if pore_masks is not None else [None] * len(KINDS)
    root = np.random.default_rng([seed, 24])
    volumes, doubles = [], 0
    for k, (kind, bg) in enumerate(zip(KINDS, backgrounds)):
        if any(d < size for d in bg.dims):
            raise ShapeError(f"{kind} background {bg.dims} cannot be cropped to {size}^3")
        dist = estimate_pore_distribution(bg, pore_masks[k])
        for count in (1, 2):
            for width in (1, 3, 5):
                scene_seed = int(root.integers(2**62))
                lo = tuple(int(root.integers(d - size + 1)) for d in bg.dims)
                region = BoxRegion(lo, tuple(a + size for a in lo))
                coplanar = count == 2 and (doubles + seed) % 2 == 0
                spec = default_spec(count, width, coplanar, (size,) * 3, scene_seed,
                                    hurst=hurst, amplitude_vox=amplitude_vox)
                crack = compose_scene(spec, (size,) * 3)
                prov = {"count": count, "widths": width, "coplanar": int(coplanar),
                        "seed": scene_seed, "region": ",".join(map(str, lo)),
                        "source": "surrogate" if surrogate else "scan"}
                volumes.append(imprint_crack(crop(bg, region), crack, dist, scene_seed, kind, prov))
                doubles += count == 2
    return TrainingSet(volumes)


def surrogate_dataset(seed: int = 0, size: int = 256) -> TrainingSet:
    """Full 24-volume protocol on procedural backgrounds."""
    pairs = [surrogate_background((size,) * 3, kind, seed) for kind in KINDS]
    return build_dataset([p[0] for p in pairs], seed, size, [p[1] for p in pairs], surrogate=True)


def single_pair(background: Volume, crack: Mask, seed: int = 0, pore_mask: Optional[Mask] = None,
                kind: str = "NC") -> LabeledVolume:
    dist = estimate_pore_distribution(background, pore_mask)
    return imprint_crack(background, crack, dist, seed, kind)


# --------------------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 64
    overlap_vox: int = 14
    min_crack_fraction: float = 0.00005
    filter_enabled: Optional[bool] = None

    def __post_init__(self):
        if self.patch_size < 1:
            raise ParameterError("patch_size must be positive")
        if not 0 <= self.overlap_vox < self.patch_size:
            raise ParameterError("overlap must satisfy 0 <= overlap < patch_size")
        if not 0 <= self.min_crack_fraction < 1:
            raise ParameterError("min_crack_fraction must lie in [0, 1)")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap_vox

    @property
    def filtering(self) -> bool:
        """Filtering defaults to on for 32-voxel patches only."""
        if self.filter_enabled is None:
            return self.patch_size == 32
        return bool(self.filter_enabled)


@dataclass(frozen=True, eq=False)
class PatchSample:
    gray: np.ndarray
    truth: np.ndarray
    origin: tuple
    source_id: int = 0

    @property
    def crack_voxels(self) -> int:
        return int(self.truth.sum())


def tile_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Regular origins ``0, s, 2s, ...`` plus a final one flush with the end."""
    if patch > extent:
        raise ShapeError(f"patch size {patch} exceeds extent {extent}")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)
    return origins


def patch_origins(dims, spec: PatchSpec) -> list[tuple[int, int, int]]:
    axes = [tile_origins(d, spec.patch_size, spec.stride) for d in dims]
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def extract_patches(lv: LabeledVolume, spec: PatchSpec, source_id: int = 0) -> list[PatchSample]:
    p = spec.patch_size
    out = []
    for o in patch_origins(lv.gray.dims, spec):
        sl = tuple(slice(a, a + p) for a in o)
        out.append(PatchSample(lv.gray.values[sl], lv.truth.bits[sl], o, source_id))
    return out


def keep_threshold(spec: PatchSpec) -> int:
    """Smallest crack-voxel count that survives the filter."""
    return math.ceil(spec.min_crack_fraction * spec.patch_size**3)


def filter_patches(patches: Iterable[PatchSample], spec: PatchSpec) -> list[PatchSample]:
    patches = list(patches)
    if not spec.filtering:
        return patches
    need = spec.min_crack_fraction * spec.patch_size**3
    return [p for p in patches if p.crack_voxels >= need]


def dataset_patches(data: TrainingSet, spec: PatchSpec) -> list[PatchSample]:
    out = []
    for i, lv in enumerate(data.volumes):
        out += filter_patches(extract_patches(lv, spec, i), spec)
    if not out:
        raise DataError("patch extraction produced no training patches")
    return out


def patch_table(data: TrainingSet, spec: PatchSpec) -> dict:
    """Counts in the layout of the training-set size table."""
    all_patches = [p for i, lv in enumerate(data.volumes) for p in extract_patches(lv, spec, i)]
    with_crack = sum(1 for p in all_patches if p.crack_voxels > 0)
    kept = len(filter_patches(all_patches, spec))
    return {"patch_size": spec.patch_size, "with_crack": with_crack,
            "without_crack": len(all_patches) - with_crack, "training": kept}


def fixed_width_dataset(n_volumes: int, size: int = 64, width=3, seed: int = 0,
                        count: int = 1, kinds: Sequence[str] = KINDS,
                        hurst: float = 0.5) -> TrainingSet:
    """Small surrogate set: ``n_volumes`` cubes, one crack scene each.

    Backgrounds cycle through ``kinds``; ``width`` may be ``"varying"``.
    """
    root = np.random.default_rng([seed, 8])
    volumes = []
    for i in range(n_volumes):
        kind = kinds[i % len(kinds)]
        bg_seed, scene_seed = (int(s) for s in root.integers(2**62, size=2))
        bg, pores = surrogate_background((size,) * 3, kind, bg_seed)
        coplanar = count == 2 and i % 2 == 0
        spec = default_spec(count, width, coplanar, (size,) * 3, scene_seed, hurst=hurst)
        crack = compose_scene(spec, (size,) * 3)
        dist = estimate_pore_distribution(bg, pores)
        prov = {"count": count, "widths": width, "coplanar": int(coplanar), "seed": scene_seed,
                "source": "surrogate"}
        volumes.append(imprint_crack(bg, crack, dist, scene_seed, kind, prov))
    return TrainingSet(volumes)
