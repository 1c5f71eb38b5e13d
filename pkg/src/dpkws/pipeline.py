"""Glue between corpus, trainer, keyword scoring and detection metrics."""

from .evaluation import DetectionTrial, frr_at_fa_rate
from .kws import DEFAULT_MAX_WINDOW, estimate_transitions, keyword_score
from .trainer import FrameData, predict_posteriors


def split_frame_data(corpus):
    """Featurised train and cv splits of a corpus."""
    spec = corpus.frame_spec
    train = FrameData.from_utterances(corpus.split("train"), spec)
    cv = FrameData.from_utterances(corpus.split("cv"), spec)
    if len(train) == 0 or len(cv) == 0:
        raise ValueError("corpus needs non-empty train and cv splits")
    return train, cv


def fit_keyword_hmm(corpus):
    """Transition probabilities from the training split's frame labels."""
    inv = corpus.inventory
    labels = [u.frame_labels for u in corpus.split("train")]
    return estimate_transitions(labels, inv.keyword_states, inv.background)


def score_corpus_split(model, hmm, corpus, split="eval", method="forward",
                       max_window=DEFAULT_MAX_WINDOW):
    """Rows ``(utterance_id, score, is_positive)`` and durations for one split."""
    data = FrameData.from_utterances(corpus.split(split), corpus.frame_spec)
    utts = corpus.split(split)
    rows, durations = [], []
    for u, X in zip(utts, data.features):
        post = predict_posteriors(model, X)
        rows.append((u.id, keyword_score(post, hmm, method, max_window), bool(u.is_positive)))
        durations.append(u.duration(corpus.frame_spec.sample_rate))
    return rows, durations


def detection_trials(rows, durations):
    return [DetectionTrial(int(i), float(s), bool(p), float(d))
            for (i, s, p), d in zip(rows, durations)]


def frr_for_rows(rows, durations, fa_per_hour=10.0):
    return frr_at_fa_rate(detection_trials(rows, durations), fa_per_hour)
