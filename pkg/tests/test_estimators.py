import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dpkws.corpus import CorpusCounts, generate_corpus, make_label_noise_set
from dpkws.estimators import AcousticModelClassifier, KeywordScorer, MFCCStacker
from dpkws.features import utterance_features


def _frames(seed=0, n=40):
    f, l, _ = make_label_noise_set(seed, n, frames=(5, 10), dim=6, noise_fraction=0.0, separation=4.0)
    groups = np.concatenate([np.full(len(y), i) for i, y in enumerate(l)])
    return np.concatenate(f), np.concatenate(l), groups


def test_stacker_matches_function():
    c = generate_corpus(0, CorpusCounts(2, 1))
    st = MFCCStacker().fit()
    out = st.transform([u.samples for u in c])
    assert st.n_features_out_ == 247
    for u, X in zip(c, out):
        assert np.array_equal(X, utterance_features(u.samples))


def test_stacker_params_roundtrip():
    st = MFCCStacker(context_left=2, context_right=1)
    assert clone(st).get_params() == st.get_params()
    assert st.fit().n_features_out_ == 13 * 4


def test_classifier_fit_predict():
    X, y, g = _frames()
    clf = AcousticModelClassifier(n_classes=2, hidden=8, n_layers=2, batch_utterances=8, max_epochs=5)
    with pytest.raises(NotFittedError):
        clf.predict(X)
    clf.fit(X, y, groups=g)
    proba = clf.predict_proba(X)
    assert proba.shape == (X.shape[0], 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.score(X, y) > 0.8
    assert clone(clf).get_params() == clf.get_params()


def test_classifier_instance_mode_uses_groups():
    X, y, g = _frames()
    clf = AcousticModelClassifier(n_classes=2, mode="instance", hidden=8, n_layers=2,
                                  batch_utterances=8, max_epochs=1)
    clf.fit(X, y, groups=g + 500, eval_set=_frames(1, 10))
    assert clf.data_parameters_.n_instances == 40
    ids = {r[2] for r in clf.sigma_snapshots_ if r[1] == "instance"}
    assert ids == set(range(500, 540))


def test_classifier_rejects_bad_input():
    X, y, g = _frames()
    clf = AcousticModelClassifier(n_classes=2, hidden=8, n_layers=2, max_epochs=1)
    with pytest.raises(ValueError):
        clf.fit(X, y + 5, groups=g)
    with pytest.raises(ValueError):
        clf.fit(X, y, groups=np.r_[g[1:], g[:1]])


def test_keyword_scorer():
    seqs = [[3] * 2 + [0, 0, 1, 1, 2, 2] + [3] * 2 for _ in range(5)]
    ks = KeywordScorer(keyword_states=(0, 1, 2), background=(3, 4)).fit(seqs)
    good = np.eye(5)[seqs[0]] * 0.9 + 0.02
    flat = np.full((10, 5), 0.2)
    s = ks.decision_function([good, flat])
    assert s[0] > s[1]
