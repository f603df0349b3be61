"""scikit-learn conventions of the estimator wrappers and input validation."""
import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fissura._validation import check_mask, check_pairs, check_volume
from fissura.estimator import CrackSegmenter, PatchExtractor
from fissura.exceptions import ParameterError, ShapeError
from fissura.volume import Mask, Volume

TINY = dict(base_filters=2, levels=2, patch_size=16, overlap=4, filter_patches=False, epochs=2,
            scales=(0.5, 1.0), tile_size=16)


def toy_pairs(n=2, seed=0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for _ in range(n):
        t = np.zeros((24, 24, 24), bool)
        k = int(rng.integers(6, 16))
        t[:, k:k + 3, :] = True
        g = np.where(t, 40, 170) + rng.normal(0, 5, t.shape)
        X.append(np.clip(g, 0, 255).astype(np.uint8))
        y.append(t)
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = toy_pairs()
    return CrackSegmenter(**TINY).fit(X, y)


def test_get_set_params_and_clone():
    est = CrackSegmenter(**TINY)
    params = est.get_params()
    assert params["base_filters"] == 2 and params["scales"] == (0.5, 1.0)
    est.set_params(threshold=0.6)
    assert est.threshold == 0.6
    assert clone(est).get_params() == est.get_params()
    assert CrackSegmenter().get_params()["epochs"] == 20


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        CrackSegmenter().predict(np.zeros((8, 8, 8), np.uint8))


def test_fit_predict_score(fitted):
    X, y = toy_pairs(1, seed=9)
    assert len(fitted.history_) == 2
    prob = fitted.predict_proba(X[0])
    assert prob.shape == (24, 24, 24) and prob.dtype == np.float32
    assert np.all((prob >= 0) & (prob <= 1))
    m = fitted.predict(X[0])
    assert isinstance(m, Mask) and m.dims == (24, 24, 24)
    s = fitted.score(X, y)
    assert 0.0 <= s <= 1.0


def test_fit_is_deterministic(fitted):
    X, y = toy_pairs()
    again = CrackSegmenter(**TINY).fit(X, y)
    assert again.history_ == fitted.history_


def test_finetune_extends_history(fitted):
    X, y = toy_pairs(1, seed=4)
    est = clone(fitted).fit(*toy_pairs())
    est.finetune(X, y, epochs=1)
    assert est.checkpoint_.epoch == 3 and len(est.history_) == 3


def test_from_checkpoint(fitted):
    est = CrackSegmenter.from_checkpoint(fitted.checkpoint_, scales=(1.0,), tile_size=16)
    x = toy_pairs(1)[0][0]
    np.testing.assert_array_equal(est.predict_proba(x), CrackSegmenter.from_checkpoint(
        fitted.checkpoint_, scales=(1.0,), tile_size=16).predict_proba(x))


def test_patch_extractor():
    X, y = toy_pairs()
    ext = PatchExtractor(patch_size=16, overlap=4).fit(X, y)
    gray, truth, origins = ext.transform_pairs(X, y)
    assert gray.shape == (16, 16, 16, 16) and truth.shape == gray.shape and len(origins) == 16
    assert ext.transform(X[0]).shape == (8, 16, 16, 16)


def test_validation_helpers():
    with pytest.raises(ShapeError):
        check_volume(np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        check_volume(np.zeros((2, 2, 2), np.int64))
    assert check_volume(np.zeros((2, 2, 2))).dtype_tag == "f32"
    with pytest.raises(ParameterError):
        check_volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ParameterError):
        check_mask(np.full((2, 2, 2), 3))
    with pytest.raises(ShapeError):
        check_pairs([np.zeros((2, 2, 2), np.uint8)], [np.zeros((2, 2, 3), bool)])
    with pytest.raises(ShapeError):
        check_pairs([np.zeros((2, 2, 2), np.uint8)] * 2, [np.zeros((2, 2, 2), bool)])
    v = Volume(np.zeros((2, 2, 2), np.uint8))
    assert check_volume(v) is v
