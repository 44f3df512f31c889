import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone

from volnet.data_io import PhantomSpec, generate_phantoms
from volnet.estimator import VolumeNetClassifier
from volnet.tensor import ShapeError
from volnet.validation import check_labels, check_volumes, zscore_volumes


@pytest.fixture(scope="module")
def phantom_data():
    vols, labels, _ = generate_phantoms(
        PhantomSpec(grid=12, noise_std=0.02, blob_count=2, radius_range=(2, 4),
                    seed=21), n_per_class=12)
    return vols[:, 0], labels  # (n, D, H, W)


@pytest.fixture(scope="module")
def fitted(phantom_data):
    x, y = phantom_data
    clf = VolumeNetClassifier(arch="micro-resattnet18", epochs=6,
                              batch_size=8, lr_start=1e-3, lr_end=1e-4, seed=0)
    return clf.fit(x[:16], y[:16])


class TestSklearnSurface:
    def test_get_set_params_round_trip(self):
        clf = VolumeNetClassifier(epochs=3, seed=9)
        params = clf.get_params()
        assert params["epochs"] == 3
        assert params["arch"] == "resattnet18"
        clone(clf)  # must not raise
        clf.set_params(epochs=5)
        assert clf.epochs == 5

    def test_fit_returns_self_and_sets_state(self, fitted):
        assert isinstance(fitted, VolumeNetClassifier)
        npt.assert_array_equal(fitted.classes_, [0, 1])
        assert fitted.model_.param_count() > 0
        assert len(fitted.report_.epochs) == 6

    def test_predict_proba_rows_sum_to_one(self, fitted, phantom_data):
        x, _ = phantom_data
        proba = fitted.predict_proba(x[16:])
        assert proba.shape == (8, 2)
        npt.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)

    def test_predict_labels_in_classes(self, fitted, phantom_data):
        x, _ = phantom_data
        pred = fitted.predict(x[16:])
        assert set(pred.tolist()) <= {0, 1}

    def test_learns_training_set(self, fitted, phantom_data):
        x, y = phantom_data
        assert fitted.score(x[:16], y[:16]) >= 0.9

    def test_explain_returns_heatmap(self, fitted, phantom_data):
        x, _ = phantom_data
        res = fitted.explain(x[1], class_index=1, layer_name="s2b2")
        assert res.upsampled.shape == (12, 12, 12)
        assert np.all(res.heatmap >= 0)

    def test_predict_before_fit_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            VolumeNetClassifier().predict(np.zeros((1, 8, 8, 8)))


class TestValidationHelpers:
    def test_check_volumes_adds_channel(self):
        x = check_volumes(np.zeros((2, 4, 4, 4)))
        assert x.shape == (2, 1, 4, 4, 4)
        assert x.dtype == np.float32

    def test_check_volumes_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            check_volumes(np.zeros((4, 4)))

    def test_check_volumes_rejects_multichannel(self):
        with pytest.raises(ShapeError):
            check_volumes(np.zeros((2, 3, 4, 4, 4)))

    def test_check_volumes_rejects_nan(self):
        x = np.zeros((1, 4, 4, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_volumes(x)

    def test_check_labels_requires_two_classes(self):
        with pytest.raises(ValueError):
            check_labels(np.zeros(4, dtype=int), 4)
        with pytest.raises(ShapeError):
            check_labels(np.array([0, 1]), 4)

    def test_zscore_per_volume(self):
        rng = np.random.default_rng(0)
        x = rng.normal(loc=5, scale=3, size=(3, 1, 4, 4, 4)).astype(np.float32)
        out = zscore_volumes(x)
        for i in range(3):
            assert abs(out[i].mean(dtype=np.float64)) < 1e-6
            assert abs(out[i].std(dtype=np.float64) - 1) < 1e-3

    def test_zscore_constant_volume_is_zero(self):
        out = zscore_volumes(np.full((1, 1, 2, 2, 2), 9.0, dtype=np.float32))
        npt.assert_array_equal(out, 0.0)


def test_fit_rejects_single_class(phantom_data):
    x, _ = phantom_data
    clf = VolumeNetClassifier(epochs=1)
    with pytest.raises(ValueError):
        clf.fit(x[:4], np.zeros(4, dtype=int))
