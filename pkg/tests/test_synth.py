"""Pore statistics, crack imprinting, dataset protocol and patch tiling."""
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from fissura.exceptions import DataError, EstimationError, FormatError, ParameterError, ShapeError
from fissura.synth import (KINDS, GrayDistribution, LabeledVolume, PatchSample, PatchSpec,
                           TrainingSet, build_dataset, dataset_patches, estimate_pore_distribution,
                           extract_patches, filter_patches, fixed_width_dataset, imprint_crack,
                           keep_threshold, patch_origins, patch_table, surrogate_background,
                           surrogate_dataset, tile_origins)
from fissura.volume import Mask, Volume


@pytest.fixture(scope="module")
def small_dataset():
    return surrogate_dataset(seed=3, size=64)


def _bimodal(seed=0, n=32):
    rng = np.random.default_rng(seed)
    vals = rng.normal(170, 8, (n, n, n))
    pores = rng.random((n, n, n)) < 0.1
    vals[pores] = rng.normal(40, 5, pores.sum())
    return Volume(np.clip(vals, 0, 255).astype(np.uint8)), Mask(pores)


# --------------------------------------------------------------------------- pore statistics


def test_otsu_pores_of_bimodal_volume():
    v, pores = _bimodal()
    dist = estimate_pore_distribution(v)
    lo, hi = dist.support
    assert hi < 120 and dist.source_count == pytest.approx(pores.count, rel=0.01)
    assert np.median(dist.knots) == pytest.approx(40, abs=2)


def test_explicit_mask_overrides_threshold():
    v, pores = _bimodal(1)
    dist = estimate_pore_distribution(v, pores)
    assert dist.source_count == pores.count
    np.testing.assert_array_equal(dist.knots, np.sort(v.values[pores.bits]))


def test_too_few_pores():
    v = Volume(np.full((16, 16, 16), 200, np.uint8))
    with pytest.raises(EstimationError):
        estimate_pore_distribution(v)
    bits = np.zeros((16, 16, 16), bool)
    bits[0, 0, :5] = True
    with pytest.raises(EstimationError):
        estimate_pore_distribution(v, Mask(bits))


def test_knot_table_is_capped_and_monotone():
    dist = GrayDistribution.from_samples(np.random.default_rng(0).random(200_000).astype(np.float32))
    assert len(dist.knots) == 65536 and dist.source_count == 200_000
    u = np.linspace(0, 1, 1001)
    assert np.all(np.diff(dist.cdf(u)) >= 0)
    assert dist.cdf(0.0) == dist.knots[0] and dist.cdf(1.0) == dist.knots[-1]


def test_imprint_only_touches_crack_voxels_and_matches_pores():
    v, pores = _bimodal(2)
    dist = estimate_pore_distribution(v, pores)
    crack = np.zeros(v.dims, bool)
    crack[:, :, 10:13] = True
    lv = imprint_crack(v, Mask(crack), dist, seed=5)
    np.testing.assert_array_equal(lv.gray.values[~crack], v.values[~crack])
    ks = stats.ks_2samp(lv.gray.values[crack], v.values[pores.bits])
    assert ks.pvalue > 0.01
    assert lv.truth == Mask(crack)
    again = imprint_crack(v, Mask(crack), dist, seed=5)
    assert again.gray == lv.gray


def test_imprint_dims_mismatch():
    v, pores = _bimodal()
    with pytest.raises(ShapeError):
        imprint_crack(v, Mask(np.zeros((4, 4, 4), bool)), estimate_pore_distribution(v, pores))


def test_surrogate_background_kinds():
    for kind in KINDS:
        bg, pores = surrogate_background((64, 64, 64), kind, seed=1)
        assert bg.values.dtype == np.uint8 and bg.dims == (64, 64, 64)
        assert pores.count >= 1000
        assert bg.values[pores.bits].mean() < bg.values[~pores.bits].mean()
    a, _ = surrogate_background((40, 40, 40), "SFRC", 2)
    b, _ = surrogate_background((40, 40, 40), "SFRC", 2)
    assert a == b
    with pytest.raises(ParameterError):
        surrogate_background((40, 40, 40), "UHPC")


# --------------------------------------------------------------------------- dataset protocol


def test_dataset_has_24_volumes_with_protocol_mix(small_dataset):
    ds = small_dataset
    assert len(ds) == 24
    assert Counter(lv.concrete_kind for lv in ds.volumes) == {k: 6 for k in KINDS}
    assert Counter(lv.provenance["widths"] for lv in ds.volumes) == {1: 8, 3: 8, 5: 8}
    assert Counter(lv.provenance["count"] for lv in ds.volumes) == {1: 12, 2: 12}
    doubles = [lv for lv in ds.volumes if lv.provenance["count"] == 2]
    assert Counter(lv.provenance["coplanar"] for lv in doubles) == {0: 6, 1: 6}
    assert all(lv.gray.dims == (64, 64, 64) and lv.truth.count > 0 for lv in ds.volumes)


def test_dataset_deterministic():
    a = fixed_width_dataset(1, 64, 3, seed=4)
    b = fixed_width_dataset(1, 64, 3, seed=4)
    assert all(x.gray == y.gray and x.truth == y.truth for x, y in zip(a.volumes, b.volumes))


def test_build_dataset_needs_four_backgrounds():
    bg, _ = surrogate_background((40, 40, 40), "NC")
    with pytest.raises(ParameterError):
        build_dataset([bg], size=32)


def test_build_dataset_crops_larger_backgrounds():
    pairs = [surrogate_background((72, 64, 68), k, 0) for k in KINDS]
    ds = build_dataset([p[0] for p in pairs], 0, 40, [p[1] for p in pairs])
    assert len(ds) == 24 and ds.volumes[0].gray.dims == (40, 40, 40)
    with pytest.raises(ShapeError):
        build_dataset([p[0] for p in pairs], 0, 66, [p[1] for p in pairs])


def test_training_set_round_trip(tmp_path):
    ds = fixed_width_dataset(2, 64, 1, seed=0, kinds=("HPC", "SFRC"))
    ds.save(tmp_path / "ds")
    back = TrainingSet.load(tmp_path / "ds")
    assert len(back) == 2
    for a, b in zip(ds.volumes, back.volumes):
        assert a.gray == b.gray and a.truth == b.truth and a.concrete_kind == b.concrete_kind
        assert {k: str(v) for k, v in a.provenance.items()} == b.provenance
    with pytest.raises(FormatError):
        TrainingSet.load(tmp_path)


def test_labeled_volume_validation():
    with pytest.raises(ShapeError):
        LabeledVolume(Volume(np.zeros((2, 2, 2), np.uint8)), Mask(np.zeros((2, 2, 3), bool)))
    with pytest.raises(ParameterError):
        LabeledVolume(Volume(np.zeros((2, 2, 2), np.uint8)), Mask(np.zeros((2, 2, 2), bool)), "X")


# --------------------------------------------------------------------------- patches


def test_tile_origins():
    assert tile_origins(64, 32, 18) == [0, 18, 32]
    assert tile_origins(256, 64, 50) == [0, 50, 100, 150, 192]
    assert tile_origins(256, 128, 114) == [0, 114, 128]
    assert tile_origins(64, 64, 50) == [0]
    with pytest.raises(ShapeError):
        tile_origins(30, 32, 18)


def test_patch_counts_per_cube():
    assert len(patch_origins((64, 64, 64), PatchSpec(32, 14))) == 27
    assert len(patch_origins((256, 256, 256), PatchSpec(64, 14))) == 125
    assert len(patch_origins((256, 256, 256), PatchSpec(32, 14))) == 14**3


def test_tiles_cover_every_voxel():
    cover = np.zeros((70, 50, 64), int)
    for o in patch_origins(cover.shape, PatchSpec(32, 14)):
        cover[o[0]:o[0] + 32, o[1]:o[1] + 32, o[2]:o[2] + 32] += 1
    assert cover.min() >= 1


def test_filter_threshold_is_two_voxels_at_32():
    spec = PatchSpec(32, 14)
    assert spec.filtering and keep_threshold(spec) == 2
    assert not PatchSpec(64).filtering and PatchSpec(64, filter_enabled=True).filtering

    def patch(n):
        t = np.zeros((32, 32, 32), bool)
        t.flat[:n] = True
        return PatchSample(np.zeros((32, 32, 32), np.uint8), t, (0, 0, 0))

    kept = filter_patches([patch(0), patch(1), patch(2), patch(3)], spec)
    assert [p.crack_voxels for p in kept] == [2, 3]


def test_patch_spec_validation():
    with pytest.raises(ParameterError):
        PatchSpec(32, 32)
    with pytest.raises(ParameterError):
        PatchSpec(32, -1)


def test_extracted_patches_match_source(small_dataset):
    lv = small_dataset.volumes[5]
    for p in extract_patches(lv, PatchSpec(32, 14), 5):
        sl = tuple(slice(a, a + 32) for a in p.origin)
        np.testing.assert_array_equal(p.gray, lv.gray.values[sl])
        np.testing.assert_array_equal(p.truth, lv.truth.bits[sl])


def test_patch_table_recount(small_dataset):
    spec = PatchSpec(32, 14)
    table = patch_table(small_dataset, spec)
    counts = [int(lv.truth.bits[o[0]:o[0] + 32, o[1]:o[1] + 32, o[2]:o[2] + 32].sum())
              for lv in small_dataset.volumes for o in patch_origins((64, 64, 64), spec)]
    assert table["with_crack"] + table["without_crack"] == 24 * 27
    assert table["with_crack"] == sum(c > 0 for c in counts)
    assert table["training"] == sum(c >= 2 for c in counts)
    assert len(dataset_patches(small_dataset, spec)) == table["training"]


def test_empty_pool_is_an_error():
    lv = LabeledVolume(Volume(np.zeros((32, 32, 32), np.uint8)), Mask(np.zeros((32, 32, 32), bool)))
    with pytest.raises(DataError):
        dataset_patches(TrainingSet([lv]), PatchSpec(32, 14))
