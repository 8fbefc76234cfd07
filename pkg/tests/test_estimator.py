import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tapsed import SoundEventDetector
from tapsed.evaluation import EventInterval
from tapsed.gradcheck import tiny_model_config


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 16, 32))
    y = (rng.random((4, 2, 32)) > 0.6).astype(float)
    det = SoundEventDetector(model_config=tiny_model_config(), epochs=2, batch_strong=2, batch_weak=2,
                             batch_unlabeled=2, dtype="float64", classes=["dog", "bell"], seed=1)
    return det.fit(X, y, X_weak=rng.normal(size=(2, 16, 32)), y_weak=np.eye(2),
                   X_unlabeled=rng.normal(size=(2, 16, 32))), X


def test_clone_and_params():
    det = SoundEventDetector(architecture="tfd", epochs=3)
    c = clone(det)
    assert c.get_params() == det.get_params()
    assert c is not det


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        SoundEventDetector().predict_proba(np.zeros((1, 128, 64)))


def test_fit_predict_shapes(fitted):
    det, X = fitted
    assert len(det.history_) == 2 and det.n_features_in_ == 16
    assert list(det.classes_) == ["dog", "bell"]
    p = det.predict_proba(X)
    assert p.shape == (4, 2, 8) and ((p >= 0) & (p <= 1)).all()
    assert det.predict_clip_proba(X).shape == (4, 2)
    events = det.predict(X)
    assert len(events) == 4
    assert all(isinstance(e, EventInterval) and type(e.label) is str for ev in events for e in ev)


def test_score_is_a_psds(fitted):
    det, X = fitted
    truth = [[EventInterval("dog", 0.0, 0.256)], [], [EventInterval("bell", 0.1, 0.4)], []]
    s = det.score(X, truth)
    assert 0.0 <= s <= 1.0


def test_predict_is_deterministic(fitted):
    det, X = fitted
    np.testing.assert_array_equal(det.predict_proba(X), det.predict_proba(X))


def test_input_validation(fitted):
    det, X = fitted
    with pytest.raises(ValueError):
        det.predict_proba(np.zeros((1, 20, 32)))
    with pytest.raises(ValueError):
        SoundEventDetector(classes=["a"]).fit(X, np.zeros((4, 2, 32)))
    with pytest.raises(ValueError):
        SoundEventDetector().fit(X, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        SoundEventDetector().fit(X, np.full((4, 2, 32), 2.0))
