import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from biamasr.data import SynthConfig, synth_corpus
from biamasr.estimator import BiamASR, check_graphemes, check_speech


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthConfig(size=20, seed=9))


@pytest.fixture(scope="module")
def fitted(corpus):
    return BiamASR(epochs=2, d_model=8).fit(corpus)


def test_params_round_trip():
    est = BiamASR(epochs=5, lr=0.01)
    params = est.get_params()
    assert params["epochs"] == 5 and params["mode"] == "biam_full"
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(mode="baseline").mode == "baseline"


def test_unfitted_raises(corpus):
    with pytest.raises(NotFittedError):
        BiamASR().predict([corpus[0].speech])


def test_fit_from_arrays_matches_utterances(corpus, fitted):
    est = BiamASR(epochs=2, d_model=8).fit([u.speech for u in corpus], [u.graphemes for u in corpus])
    for k, v in fitted.checkpoint_.params.items():
        assert np.array_equal(est.checkpoint_.params[k], v)


def test_predict_transform_align(corpus, fitted):
    X = [u.speech for u in corpus[:3]]
    hyps = fitted.predict(X)
    assert len(hyps) == 3 and all(isinstance(h, list) for h in hyps)
    emb = fitted.transform(X)
    assert [e.shape for e in emb] == [(m.shape[0], 8) for m in X]
    w = fitted.align(X, [u.graphemes for u in corpus[:3]])
    for wi, u in zip(w, corpus[:3]):
        assert wi.shape == (u.n_frames, len(u.graphemes))
        np.testing.assert_allclose(wi.sum(axis=1), 1.0, atol=1e-12)


def test_score_is_one_minus_cer(corpus, fitted):
    s = fitted.score(corpus)
    assert s == pytest.approx(1.0 - fitted.evaluate(corpus)["cer"])


def test_fit_with_texts_runs_all_stages(corpus):
    est = BiamASR(epochs=1, d_model=8, pretrain_epochs=1, finetune_epochs=1)
    est.fit(corpus, texts=[[1, 2, 3], [4, 4, 5]])
    assert est.checkpoint_.stage == "finetune"
    assert len(est.history_) == 3


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_speech([np.zeros((0, 3))])
    with pytest.raises(ValueError, match="features"):
        check_speech([np.zeros((2, 3))], n_features=4)
    with pytest.raises(ValueError, match="empty"):
        check_graphemes([[]], 5)
    with pytest.raises(ValueError, match="outside"):
        check_graphemes([[1, 6]], 5)
    with pytest.raises(ValueError, match="2 speech items"):
        check_graphemes([[1]], 5, n=2)
    with pytest.raises(ValueError, match="y is required"):
        BiamASR().fit([np.zeros((3, 8))])


def test_predict_rejects_wrong_width(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted.predict([np.zeros((4, 3))])
