"""scikit-learn style wrappers around the feature, training and scoring code."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .features import FrameSpec, utterance_features
from .kws import DEFAULT_MAX_WINDOW, estimate_transitions, score_utterances
from .trainer import FrameData, TrainConfig, predict_posteriors, train


class MFCCStacker(TransformerMixin, BaseEstimator):
    """Waveforms -> context-stacked MFCC frames (stateless).

    ``transform`` takes a sequence of 1-D waveforms and returns one
    ``(n_frames, stacked_dim)`` array per waveform.
    """

    def __init__(self, sample_rate=16000, window_length=0.025, hop=0.010, mel_filters=40,
                 cepstral_coeffs=13, context_left=9, context_right=9):
        self.sample_rate = sample_rate
        self.window_length = window_length
        self.hop = hop
        self.mel_filters = mel_filters
        self.cepstral_coeffs = cepstral_coeffs
        self.context_left = context_left
        self.context_right = context_right

    def _spec(self):
        return FrameSpec(**self.get_params())

    def fit(self, X=None, y=None):
        self.frame_spec_ = self._spec()
        self.n_features_out_ = self.frame_spec_.stacked_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "frame_spec_")
        return [utterance_features(np.asarray(w, dtype=np.float64), self.frame_spec_) for w in X]


def _split_groups(X, y, groups):
    """Cut frame arrays into utterances at changes of ``groups``."""
    groups = np.asarray(groups)
    if groups.shape[0] != X.shape[0]:
        raise ValueError("groups must have one entry per frame")
    cuts = np.flatnonzero(groups[1:] != groups[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ids = groups[starts]
    if len(np.unique(ids)) != len(ids):
        raise ValueError("frames of each utterance must be contiguous")
    return FrameData(np.split(X, cuts), np.split(y, cuts), ids.astype(np.int64))


class AcousticModelClassifier(ClassifierMixin, BaseEstimator):
    """Frame classifier trained with optional class/instance data parameters.

    Parameters mirror :class:`dpkws.trainer.TrainConfig`.  ``fit`` takes
    stacked frames ``X``, integer targets ``y`` in ``[0, n_classes)`` and
    ``groups`` giving each frame's utterance id; frames of one utterance
    must be contiguous.  Without ``groups`` every frame is its own
    utterance.  ``eval_set=(X_cv, y_cv, groups_cv)`` drives the plateau
    schedule and early stopping; by default the training data is reused.
    """

    def __init__(self, n_classes=20, mode="baseline", class_lr=0.001, class_init=1.0,
                 instance_lr=0.001, instance_init=1.0, weight_decay=0.01, model_lr=0.01,
                 batch_utterances=256, max_epochs=50, early_stop_patience=9, hidden=64,
                 n_layers=5, seed=0):
        self.n_classes = n_classes
        self.mode = mode
        self.class_lr = class_lr
        self.class_init = class_init
        self.instance_lr = instance_lr
        self.instance_init = instance_init
        self.weight_decay = weight_decay
        self.model_lr = model_lr
        self.batch_utterances = batch_utterances
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.hidden = hidden
        self.n_layers = n_layers
        self.seed = seed

    def _config(self):
        params = self.get_params()
        params.pop("n_classes")
        return TrainConfig(**params)

    def fit(self, X, y, groups=None, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.intp)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"targets must lie in [0, {self.n_classes})")
        if groups is None:
            groups = np.arange(X.shape[0])
        data = _split_groups(X, y, groups)
        if eval_set is not None:
            Xc, yc, gc = eval_set
            Xc, yc = check_X_y(Xc, yc, dtype=np.float64)
            cv = _split_groups(Xc, yc.astype(np.intp), gc)
        else:
            cv = data
        result = train(self._config(), data, cv, n_classes=self.n_classes)
        self.model_ = result.model
        self.data_parameters_ = result.store
        self.training_log_ = result.log
        self.sigma_snapshots_ = result.snapshots
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return predict_posteriors(self.model_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class KeywordScorer(BaseEstimator):
    """HMM keyword scorer fitted on training frame-label sequences."""

    def __init__(self, keyword_states=tuple(range(18)), background=(18, 19), method="forward",
                 max_window=DEFAULT_MAX_WINDOW):
        self.keyword_states = keyword_states
        self.background = background
        self.method = method
        self.max_window = max_window

    def fit(self, label_sequences, y=None):
        self.hmm_ = estimate_transitions(label_sequences, list(self.keyword_states),
                                         list(self.background))
        return self

    def decision_function(self, posteriors):
        """One score per utterance from a sequence of ``(n_frames, K)`` posteriors."""
        check_is_fitted(self, "hmm_")
        return score_utterances(posteriors, self.hmm_, self.method, self.max_window)
