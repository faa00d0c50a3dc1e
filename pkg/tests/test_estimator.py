import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from seqcvae import SeqCVAE

SMALL = dict(latent_dim=4, hidden_dim=12, embed_dim=8, blm_hidden_dim=12, batch_size=4, max_steps=8, blm_steps=4, dtype="float64")


def _data():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    y = [["a dog runs", "a puppy runs"], "a cat sleeps", "a man eats", ["a dog sits"], "a cat runs", "a man sleeps"]
    return X, y


def test_get_params_and_clone():
    est = SeqCVAE(variant="cvae_single_z", latent_dim=3)
    p = est.get_params()
    assert p["variant"] == "cvae_single_z" and p["latent_dim"] == 3 and p["lr"] == 1e-3
    c = clone(est)
    assert c.get_params() == p and c is not est
    assert SeqCVAE().set_params(max_steps=5).max_steps == 5


def test_unfitted_estimator_raises():
    with pytest.raises(NotFittedError):
        SeqCVAE().predict(np.zeros((1, 3)))


def test_fit_predict_sample_score_and_persist(tmp_path):
    X, y = _data()
    est = SeqCVAE(**SMALL).fit(X, y)
    assert est.n_features_in_ == 3 and len(est.history_) >= 2
    preds = est.predict(X)
    assert len(preds) == 6 and all(isinstance(p, str) for p in preds)
    samples = est.sample(X[:2], k=3, seed=1)
    assert [len(s) for s in samples] == [3, 3]
    assert est.sample(X[:2], k=3, seed=1) == samples
    assert np.isfinite(est.score(X, y))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 4)))
    est.save(tmp_path / "m.sqcv")
    back = SeqCVAE.load(tmp_path / "m.sqcv")
    assert back.predict(X) == preds
    assert back.get_params()["latent_dim"] == 4


def test_fit_is_reproducible():
    X, y = _data()
    a = SeqCVAE(**SMALL, random_state=3).fit(X, y)
    b = SeqCVAE(**SMALL, random_state=3).fit(X, y)
    assert a.history_ == b.history_


def test_fit_rejects_bad_input():
    X, y = _data()
    with pytest.raises(ValueError):
        SeqCVAE(**SMALL).fit(X, y[:-1])
    with pytest.raises(ValueError):
        SeqCVAE(**SMALL).fit(X, [[]] + y[1:])
