"""Fractional Brownian fields, surface voxelization and crack scenes."""
import numpy as np
import pytest

from fissura.cracks import (CrackSpec, FbmParams, Orientation, compose_scene, crack_masks,
                            default_spec, fbm_field, gen_fbm_field, voxelize_surface)
from fissura.exceptions import ParameterError, ShapeError


def increment_slope(fields, lags=(1, 2, 4, 8, 16)):
    """Log-log slope of the mean squared increment against lag, both axes pooled."""
    v = []
    for k in lags:
        d0 = np.concatenate([(f[k:, :] - f[:-k, :]).ravel() for f in fields])
        d1 = np.concatenate([(f[:, k:] - f[:, :-k]).ravel() for f in fields])
        v.append(np.mean(np.concatenate([d0, d1]) ** 2))
    return np.polyfit(np.log(lags), np.log(v), 1)[0]


def test_fbm_pinned_and_scaled():
    f = gen_fbm_field(FbmParams(grid_n=64, hurst=0.6, amplitude_vox=3.0, seed=4))
    assert f.shape == (64, 64)
    assert f[0, 0] == 0.0
    assert f.std() == pytest.approx(3.0, rel=1e-12)


def test_fbm_deterministic_per_seed():
    a = gen_fbm_field(FbmParams(grid_n=32, seed=9))
    b = gen_fbm_field(FbmParams(grid_n=32, seed=9))
    c = gen_fbm_field(FbmParams(grid_n=32, seed=10))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("hurst", [0.3, 0.8])
def test_raw_field_variogram(hurst):
    """E[(B(x+r)-B(x))^2] = 2 r^(2H) on the grid spacing 1/(sqrt(2)(n-1))."""
    n = 33
    h = 1 / (np.sqrt(2) * (n - 1))
    rng = np.random.default_rng(21)
    fields = [fbm_field(n, hurst, rng) for _ in range(300)]
    for k in (1, 8):
        inc = np.concatenate([(f[k:, :] - f[:-k, :]).ravel() for f in fields])
        assert np.mean(inc**2) == pytest.approx(2 * (k * h) ** (2 * hurst), rel=0.1)


def test_slope_tracks_hurst_on_small_sample():
    fields = [gen_fbm_field(FbmParams(128, 0.5, 1.0, s)) for s in range(20)]
    assert increment_slope(fields) == pytest.approx(1.0, abs=0.1)


def test_fbm_params_validation():
    with pytest.raises(ParameterError):
        FbmParams(hurst=1.0)
    with pytest.raises(ParameterError):
        FbmParams(amplitude_vox=0)


def test_flat_surface_voxelization():
    dims = (32, 40, 48)
    for plane, normal in (("xy", 2), ("xz", 1), ("yz", 0)):
        m = voxelize_surface(np.zeros((4, 4)), Orientation(plane), dims).bits
        others = tuple(dims[a] for a in range(3) if a != normal)
        assert m.sum() == others[0] * others[1]
        idx = np.nonzero(m.any(axis=tuple(a for a in range(3) if a != normal)))[0]
        assert list(idx) == [dims[normal] // 2]


def test_voxelization_rounds_half_up_and_clamps():
    field = np.zeros((32, 32))
    field[0, 0] = 0.5
    field[1, 1] = -100
    m = voxelize_surface(field, Orientation("xy", offset=10.0), (32, 32, 32)).bits
    assert m[0, 0, 11] and m[1, 1, 0] and m[2, 2, 10]


def test_tilt_shears_surface():
    m = voxelize_surface(np.zeros((33, 33)), Orientation("xy", tilt_deg=45), (33, 33, 33)).bits
    z_of_x = [int(np.argmax(m[x, 0])) for x in range(33)]
    # centre 16.5, height u - 16, half-up rounding, clamped to the last plane
    assert z_of_x == [min(x + 1, 32) for x in range(33)]


def test_orientation_validation():
    with pytest.raises(ParameterError):
        Orientation("ab")
    with pytest.raises(ParameterError):
        Orientation("xy", tilt_deg=80)


@pytest.mark.parametrize("width", [1, 3, 5])
def test_flat_crack_thickness(width):
    spec = CrackSpec(widths=(width,), amplitude_vox=1e-9, orientations=(Orientation("xz"),))
    m = compose_scene(spec, (32, 32, 32)).bits
    # every column along the normal (y) crosses exactly `width` voxels
    np.testing.assert_array_equal(m.sum(axis=1), width)


def test_rough_crack_columns_at_least_width():
    spec = default_spec(1, 3, False, (48, 48, 48), seed=3, max_tilt_deg=0)
    m = compose_scene(spec, (48, 48, 48)).bits
    normal = spec.orientations[0].normal_axis
    assert m.sum(axis=normal).min() >= 3


def test_scene_determinism_and_seed_dependence():
    spec = default_spec(2, 5, False, (40, 40, 40), seed=12)
    assert compose_scene(spec, (40, 40, 40)) == compose_scene(spec, (40, 40, 40))
    other = default_spec(2, 5, False, (40, 40, 40), seed=13)
    assert compose_scene(other, (40, 40, 40)) != compose_scene(spec, (40, 40, 40))


def test_double_crack_planes():
    cop = default_spec(2, 1, True, (48, 48, 48), seed=1)
    assert cop.orientations[0].plane == cop.orientations[1].plane
    assert {o.offset for o in cop.orientations} == {16.0, 32.0}
    cross = default_spec(2, 1, False, (48, 48, 48), seed=1)
    assert cross.orientations[0].plane != cross.orientations[1].plane
    masks = crack_masks(cross, (48, 48, 48))
    union = compose_scene(cross, (48, 48, 48)).bits
    np.testing.assert_array_equal(union, masks[0].bits | masks[1].bits)


def test_spec_validation():
    with pytest.raises(ParameterError):
        CrackSpec(count=3, widths=(1,) * 3, orientations=(Orientation(),) * 3)
    with pytest.raises(ParameterError):
        CrackSpec(count=2, widths=(1, 1), orientations=(Orientation("xy"), Orientation("xz")),
                  coplanar=True)
    with pytest.raises(ParameterError):
        CrackSpec(count=2, widths=(1, 1), orientations=(Orientation("xy"), Orientation("xy")))
    with pytest.raises(ParameterError):
        CrackSpec(widths=(0,))
    with pytest.raises(ShapeError):
        compose_scene(CrackSpec(), (16, 32, 32))


def test_varying_width_within_bounds():
    spec = CrackSpec(widths=("varying",), amplitude_vox=1e-9, orientations=(Orientation("xy"),))
    m = compose_scene(spec, (48, 48, 48)).bits
    col = m.sum(axis=2)
    assert col.min() >= 1 and col.max() <= 13 and col.max() > col.min()
