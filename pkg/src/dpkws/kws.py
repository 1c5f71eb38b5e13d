"""DNN-HMM keyword scoring.

Frame posteriors from the acoustic model are accumulated along a strictly
left-to-right HMM over the keyword states.  A window's score is the
length-normalised keyword log-likelihood minus the mean background
log-likelihood over the same frames; the utterance score is the best window.
"""

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_WINDOW = 300


class KwsError(ValueError):
    pass


@dataclass
class KeywordHmm:
    """Left-to-right HMM: state ``s`` either loops or advances to ``s + 1``.

    The last state's forward probability is its exit probability.
    """

    states: list
    log_self: np.ndarray
    log_forward: np.ndarray
    background: list

    def __post_init__(self):
        self.log_self = np.asarray(self.log_self, dtype=np.float64)
        self.log_forward = np.asarray(self.log_forward, dtype=np.float64)
        total = np.exp(self.log_self) + np.exp(self.log_forward)
        if not np.allclose(total, 1.0, atol=1e-9, rtol=0):
            raise KwsError("outgoing transition probabilities must sum to 1")

    @property
    def n_states(self):
        return len(self.states)

    def log_transition_matrix(self):
        """Square matrix over the states (the exit from the last state is dropped)."""
        S = self.n_states
        m = np.full((S, S), -np.inf)
        m[np.arange(S), np.arange(S)] = self.log_self
        m[np.arange(S - 1), np.arange(1, S)] = self.log_forward[:-1]
        return m

    @classmethod
    def from_self_loops(cls, states, self_loop, background):
        p = np.broadcast_to(np.asarray(self_loop, dtype=np.float64), (len(states),))
        with np.errstate(divide="ignore"):
            return cls(list(states), np.log(p), np.log1p(-p), list(background))


def estimate_transitions(label_sequences, keyword_states, background):
    """Self-loop probabilities from consecutive-frame label pairs, add-one smoothed.

    For each state, ``occupancy`` counts frames with a successor and
    ``exits`` those whose successor carries a different label.
    """
    keyword_states = list(keyword_states)
    occupancy = np.zeros(len(keyword_states))
    exits = np.zeros(len(keyword_states))
    index = {s: i for i, s in enumerate(keyword_states)}
    seen = np.zeros(len(keyword_states), dtype=bool)
    lookup = np.full(max(max(keyword_states), max(background)) + 2, -1)
    lookup[keyword_states] = np.arange(len(keyword_states))
    n_seq = 0
    for labels in label_sequences:
        n_seq += 1
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            continue
        idx = lookup[np.clip(labels, 0, lookup.shape[0] - 1)]
        seen[idx[idx >= 0]] = True
        cur, nxt = idx[:-1], labels[1:] != labels[:-1]
        mask = cur >= 0
        occupancy += np.bincount(cur[mask], minlength=len(keyword_states))
        exits += np.bincount(cur[mask], weights=nxt[mask], minlength=len(keyword_states))
    if n_seq == 0:
        raise KwsError("no label sequences")
    if not seen.all():
        missing = [s for s, i in index.items() if not seen[i]]
        raise KwsError(f"keyword states absent from training labels: {missing}")
    self_loop = (occupancy - exits + 1.0) / (occupancy + 2.0)
    return KeywordHmm.from_self_loops(keyword_states, self_loop, background)


def _step(alpha, hmm, combine):
    stay = alpha + hmm.log_self
    move = np.full_like(alpha, -np.inf)
    move[..., 1:] = alpha[..., :-1] + hmm.log_forward[:-1]
    return combine(stay, move)


def _combiner(method):
    if method == "forward":
        return np.logaddexp
    if method == "viterbi":
        return np.maximum
    raise KwsError(f"unknown scoring method {method!r}")


def forward_log_likelihood(log_emissions, hmm, method="forward"):
    """log P(frames, start in the first state, end in the last state).

    ``log_emissions`` has shape (T, n_states).  With ``method="viterbi"``
    the best single path replaces the sum.
    """
    combine = _combiner(method)
    E = np.asarray(log_emissions, dtype=np.float64)
    alpha = np.full(hmm.n_states, -np.inf)
    alpha[0] = E[0, 0]
    for t in range(1, E.shape[0]):
        alpha = _step(alpha, hmm, combine) + E[t]
    return float(alpha[-1])


def _log_posteriors(posteriors):
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise KwsError("posteriors must be (n_frames, n_classes)")
    return np.log(np.maximum(p, np.finfo(np.float64).tiny))


def keyword_score(posteriors, hmm, method="forward", max_window=DEFAULT_MAX_WINDOW):
    """Best windowed keyword score of one utterance; ``-inf`` if too short."""
    combine = _combiner(method)
    logp = _log_posteriors(posteriors)
    T, S = logp.shape[0], hmm.n_states
    if T < S:
        return -np.inf
    E = logp[:, hmm.states]
    p = np.asarray(posteriors, dtype=np.float64)
    bg = np.log(np.maximum(p[:, hmm.background].mean(axis=1), np.finfo(np.float64).tiny))
    cum_bg = np.concatenate([[0.0], np.cumsum(bg)])

    starts = np.empty(0, dtype=np.int64)
    alpha = np.empty((0, S))
    best = -np.inf
    fresh = np.full((1, S), -np.inf)
    for t in range(T):
        if alpha.shape[0]:
            alpha = _step(alpha, hmm, combine) + E[t]
        row = fresh.copy()
        row[0, 0] = E[t, 0]
        alpha = np.vstack([alpha, row])
        starts = np.append(starts, t)
        if max_window and alpha.shape[0] > max_window:
            alpha = alpha[-max_window:]
            starts = starts[-max_window:]
        end = alpha[:, -1]
        ok = np.isfinite(end)
        if ok.any():
            length = t + 1 - starts[ok]
            scores = (end[ok] - (cum_bg[t + 1] - cum_bg[starts[ok]])) / length
            best = max(best, float(scores.max()))
    return best


def score_utterances(posterior_list, hmm, method="forward", max_window=DEFAULT_MAX_WINDOW):
    return np.array([keyword_score(p, hmm, method, max_window) for p in posterior_list])


def write_scores(path, rows):
    """CSV ``utterance_id,score,is_positive``; ``-inf`` marks too-short utterances."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("utterance_id", "score", "is_positive"))
        for uid, score, pos in rows:
            w.writerow((int(uid), repr(float(score)), int(bool(pos))))


def read_scores(path):
    with open(path, newline="") as fh:
        return [(int(r["utterance_id"]), float(r["score"]), bool(int(r["is_positive"])))
                for r in csv.DictReader(fh)]
