"""Synthetic keyword corpus and multicondition augmentation.

Each target class is rendered as a short-time texture (a few tonal
components plus a little broadband noise), so per-frame labels are known by
construction.  Noisy copies are made by convolving a noise clip with a
synthetic impulse response and adding it at an SNR drawn uniformly from
[-10, 10) dB.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from ._rng import substream
from .features import FrameSpec

logger = logging.getLogger(__name__)

SNR_RANGE = (-10.0, 10.0)
CV_FRACTION = 0.02
NOISE_KINDS = ("white", "pink", "brown", "hum", "machine", "babble")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class TargetInventory:
    """20 classes: 6 phones x 3 states of the keyword, silence, other speech."""

    n_phones: int = 6
    states_per_phone: int = 3

    @property
    def n_keyword_states(self):
        return self.n_phones * self.states_per_phone

    @property
    def silence(self):
        return self.n_keyword_states

    @property
    def other(self):
        return self.n_keyword_states + 1

    @property
    def n_classes(self):
        return self.n_keyword_states + 2

    @property
    def keyword_states(self):
        return list(range(self.n_keyword_states))

    @property
    def background(self):
        return [self.silence, self.other]

    def name(self, k):
        if k == self.silence:
            return "sil"
        if k == self.other:
            return "other"
        return f"ph{k // self.states_per_phone}s{k % self.states_per_phone}"


@dataclass(frozen=True)
class KeywordSpec:
    """Frame-count ranges (inclusive) for each part of an utterance."""

    state_frames: tuple = (2, 5)
    silence_frames: tuple = (4, 12)
    filler_frames: tuple = (0, 15)
    negative_filler_frames: tuple = (30, 70)
    # negatives that render the keyword with a block of states swapped for babble
    near_miss_fraction: float = 0.25
    near_miss_states: tuple = (3, 6)


@dataclass(frozen=True)
class CorpusCounts:
    positives: int = 100
    negatives: int = 100
    eval_positives: int = 0
    eval_negatives: int = 0

    def __post_init__(self):
        if self.positives < 0 or self.negatives < 0 or self.positives + self.negatives == 0:
            raise CorpusError("counts must be non-negative with at least one training utterance")


@dataclass
class Utterance:
    id: int
    samples: np.ndarray
    frame_labels: np.ndarray
    is_positive: bool
    provenance: dict = field(default_factory=lambda: {"kind": "clean"})
    split: str = "train"

    @property
    def is_noisy(self):
        return self.provenance.get("kind") == "noisy"

    @property
    def source_id(self):
        return self.provenance.get("source_id", self.id)

    def duration(self, sample_rate=16000):
        return self.samples.shape[0] / sample_rate


@dataclass
class Corpus:
    utterances: list
    seed: int
    inventory: TargetInventory = field(default_factory=TargetInventory)
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def split(self, name):
        return [u for u in self.utterances if u.split == name]

    def by_id(self):
        return {u.id: u for u in self.utterances}


# -- class textures ---------------------------------------------------------

@dataclass(frozen=True)
class _Texture:
    freqs: tuple
    amps: tuple
    noise: float


def _class_textures(seed, inventory):
    rng = substream(seed, "textures")
    textures = {}
    for k in inventory.keyword_states:
        freqs = np.sort(rng.uniform(250.0, 5500.0, size=3))
        amps = rng.uniform(0.3, 1.0, size=3)
        textures[k] = _Texture(tuple(freqs), tuple(amps), 0.05)
    return textures


def _render_tonal(tex, n, rng, sr, level):
    t = np.arange(n) / sr
    jitter = rng.uniform(0.96, 1.04)
    x = np.zeros(n)
    for f, a in zip(tex.freqs, tex.amps):
        x += a * np.sin(2 * np.pi * f * jitter * t + rng.uniform(0, 2 * np.pi))
    x += tex.noise * rng.standard_normal(n)
    return level * x / np.sqrt(np.mean(x * x))


def _render(label, n, textures, inventory, rng, sr):
    if label == inventory.silence:
        return 0.003 * rng.standard_normal(n)
    if label == inventory.other:
        # babble: a fresh random texture per segment
        tex = _Texture(tuple(np.sort(rng.uniform(200.0, 6000.0, size=3))),
                       tuple(rng.uniform(0.3, 1.0, size=3)), 0.1)
        return _render_tonal(tex, n, rng, sr, rng.uniform(0.05, 0.15))
    return _render_tonal(textures[label], n, rng, sr, rng.uniform(0.07, 0.13))


def synthesize(frame_labels, textures, inventory, spec, rng):
    """Waveform whose MFCC frame ``t`` is centred inside label slot ``t``."""
    labels = np.asarray(frame_labels)
    win, hop = spec.window_samples, spec.hop_samples
    n_samples = labels.shape[0] * hop + (win - hop)
    off = (win - hop) // 2
    slot = np.clip((np.arange(n_samples) - off) // hop, 0, labels.shape[0] - 1)
    per_sample = labels[slot]
    change = np.flatnonzero(np.diff(per_sample)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [n_samples]])
    out = np.empty(n_samples)
    for s, e in zip(starts, ends):
        out[s:e] = _render(int(per_sample[s]), e - s, textures, inventory, rng, spec.sample_rate)
    return out


def _draw(rng, lohi):
    lo, hi = lohi
    return int(rng.integers(lo, hi + 1))


def _positive_labels(rng, inventory, kw):
    sil, other = inventory.silence, inventory.other
    parts = [[sil] * _draw(rng, kw.silence_frames)]
    parts.append([other] * _draw(rng, kw.filler_frames))
    for s in inventory.keyword_states:
        parts.append([s] * _draw(rng, kw.state_frames))
    parts.append([other] * _draw(rng, kw.filler_frames))
    parts.append([sil] * _draw(rng, kw.silence_frames))
    return np.array([x for p in parts for x in p], dtype=np.int64)


def _near_miss_labels(rng, inventory, kw):
    labels = _positive_labels(rng, inventory, kw)
    states = inventory.keyword_states
    width = _draw(rng, kw.near_miss_states)
    first = int(rng.integers(0, len(states) - width + 1))
    labels[np.isin(labels, states[first:first + width])] = inventory.other
    return labels


def _negative_labels(rng, inventory, kw):
    if kw.near_miss_fraction and rng.random() < kw.near_miss_fraction:
        return _near_miss_labels(rng, inventory, kw)
    sil, other = inventory.silence, inventory.other
    n_fill = max(1, _draw(rng, kw.negative_filler_frames))
    parts = [[sil] * _draw(rng, kw.silence_frames), [other] * n_fill,
             [sil] * _draw(rng, kw.silence_frames)]
    return np.array([x for p in parts for x in p], dtype=np.int64)


def generate_corpus(seed, counts, keyword_spec=None, inventory=None, frame_spec=None):
    """Seeded synthetic corpus; ids run 0..n-1 in (train pos, train neg, eval pos, eval neg) order."""
    if isinstance(counts, dict):
        counts = CorpusCounts(**counts)
    kw = keyword_spec or KeywordSpec()
    inventory = inventory or TargetInventory()
    spec = frame_spec or FrameSpec()
    textures = _class_textures(seed, inventory)
    rng = substream(seed, "corpus")
    plan = ([(True, "train")] * counts.positives + [(False, "train")] * counts.negatives
            + [(True, "eval")] * counts.eval_positives + [(False, "eval")] * counts.eval_negatives)
    utts = []
    for uid, (pos, split) in enumerate(plan):
        labels = _positive_labels(rng, inventory, kw) if pos else _negative_labels(rng, inventory, kw)
        samples = synthesize(labels, textures, inventory, spec, rng).astype(np.float32)
        utts.append(Utterance(uid, samples, labels, pos, {"kind": "clean"}, split))
    return Corpus(utts, seed, inventory, spec,
                  meta={"counts": asdict(counts), "keyword_spec": asdict(kw)})


# -- noise, impulse responses, mixing -----------------------------------------

def make_noise(kind, n, rng, sr=16000):
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / sr)
        f[0] = f[1]
        spec /= np.sqrt(f) if kind == "pink" else f
        x = np.fft.irfft(spec, n)
    elif kind == "hum":
        t = np.arange(n) / sr
        base = rng.uniform(50.0, 120.0)
        x = sum(rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * base * h * t + rng.uniform(0, 6.3))
                for h in range(1, 8))
        x = x + 0.05 * rng.standard_normal(n)
    elif kind == "machine":
        t = np.arange(n) / sr
        carrier = fftconvolve(rng.standard_normal(n), np.hanning(32), mode="same")
        x = carrier * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 15.0) * t))
    elif kind == "babble":
        t = np.arange(n) / sr
        x = np.zeros(n)
        for _ in range(6):
            env = np.clip(np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 6.3)), 0, None)
            for f in rng.uniform(200.0, 6000.0, size=3):
                x += env * np.sin(2 * np.pi * f * t + rng.uniform(0, 6.3))
    else:
        raise CorpusError(f"unknown noise kind {kind!r}")
    return x / np.sqrt(np.mean(x * x))


def make_noise_bank(seed, n_clips=12, duration=2.0, sr=16000):
    """List of ``(kind, clip)`` pairs cycling through :data:`NOISE_KINDS`."""
    rng = substream(seed, "noise")
    n = int(duration * sr)
    return [(NOISE_KINDS[i % len(NOISE_KINDS)], make_noise(NOISE_KINDS[i % len(NOISE_KINDS)], n, rng, sr))
            for i in range(n_clips)]


def make_rir(rng, sr=16000, decay=(0.2, 0.6)):
    """Exponentially decaying random FIR with a unit direct path.

    ``decay`` bounds the reverberation time (60 dB decay) in seconds.
    """
    t60 = rng.uniform(*decay)
    n = int(t60 * sr)
    h = rng.standard_normal(n) * np.exp(-6.908 * np.arange(n) / (t60 * sr)) * 0.3
    h[0] = 1.0
    return h


def fit_noise(noise, length, rng=None):
    """Noise segment of ``length`` samples; loops with a random offset if short."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] == 0:
        raise CorpusError("empty noise clip")
    offset = int(rng.integers(0, noise.shape[0])) if rng is not None else 0
    reps = -(-(offset + length) // noise.shape[0])
    return np.tile(noise, reps)[offset:offset + length]


def reverberate(noise, rir, length):
    return fftconvolve(np.asarray(noise, dtype=np.float64), np.asarray(rir, dtype=np.float64))[:length]


def power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


@dataclass
class MixResult:
    noisy: np.ndarray
    clean_component: np.ndarray
    noise_component: np.ndarray
    noise_gain: float
    peak_gain: float
    target_snr_db: float

    def measured_snr_db(self):
        return 10.0 * np.log10(power(self.clean_component) / power(self.noise_component))


def mix_at_snr(clean, noise, rir, target_snr_db, rng=None):
    """Reverberate ``noise``, scale it to ``target_snr_db`` against ``clean`` and add.

    Powers are means over the whole utterance.  If the sum clips, both
    components are scaled down together (``peak_gain``), which preserves
    the SNR.
    """
    if not np.isfinite(target_snr_db):
        raise CorpusError("target SNR must be finite")
    clean = np.asarray(clean, dtype=np.float64)
    seg = fit_noise(noise, clean.shape[0], rng)
    rev = reverberate(seg, np.array([1.0]) if rir is None else rir, clean.shape[0])
    p_clean, p_noise = power(clean), power(rev)
    if p_clean == 0.0:
        raise CorpusError("clean signal has zero power")
    if p_noise == 0.0:
        raise CorpusError("noise has zero power")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0)))
    scaled = gain * rev
    mixed = clean + scaled
    peak = np.max(np.abs(mixed))
    peak_gain = 1.0 / peak if peak > 1.0 else 1.0
    return MixResult(mixed * peak_gain, clean * peak_gain, scaled * peak_gain,
                     float(gain), float(peak_gain), float(target_snr_db))


def assign_cv_split(corpus, seed, fraction=CV_FRACTION):
    """Move ``round(fraction * n_sources)`` training sources (and their noisy copies) to cv."""
    rng = substream(seed, "split")
    sources = sorted({u.source_id for u in corpus if u.split == "train"})
    n_all = len({u.source_id for u in corpus})
    n_cv = min(len(sources), max(1, int(round(fraction * n_all))))
    chosen = set(rng.choice(sources, size=n_cv, replace=False).tolist()) if sources else set()
    for u in corpus:
        if u.split == "train" and u.source_id in chosen:
            u.split = "cv"
    return corpus


def build_multicondition(clean_corpus, noise_bank, seed, rir_decay=(0.2, 0.6),
                         snr_range=SNR_RANGE, cv_fraction=CV_FRACTION):
    """Append one reverberant noisy copy of every clean utterance, then pick the cv split."""
    if len(clean_corpus) == 0:
        raise CorpusError("clean corpus is empty")
    rng = substream(seed, "augmentation")
    next_id = max(u.id for u in clean_corpus) + 1
    out = [replace(u, provenance=dict(u.provenance)) for u in clean_corpus]
    for u in clean_corpus:
        kind, clip = noise_bank[int(rng.integers(len(noise_bank)))]
        snr = float(rng.uniform(*snr_range))
        rir = make_rir(rng, clean_corpus.frame_spec.sample_rate, rir_decay)
        mix = mix_at_snr(u.samples, clip, rir, snr, rng)
        prov = {"kind": "noisy", "snr_db": snr, "noise_kind": kind, "source_id": u.id,
                "peak_gain": mix.peak_gain}
        out.append(Utterance(next_id, mix.noisy.astype(np.float32), u.frame_labels.copy(),
                             u.is_positive, prov, u.split))
        next_id += 1
    corpus = Corpus(out, clean_corpus.seed, clean_corpus.inventory, clean_corpus.frame_spec,
                    meta=dict(clean_corpus.meta, multicondition={"seed": seed, "rir_decay": list(rir_decay),
                                                                 "snr_range": list(snr_range),
                                                                 "snr_reference": "full utterance"}))
    return assign_cv_split(corpus, seed, cv_fraction)


# -- on-disk layout ----------------------------------------------------------

MANIFEST = "manifest.jsonl"


def write_corpus(corpus, root):
    """Write wavs, label files and ``manifest.jsonl`` under ``root``."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    sr = corpus.frame_spec.sample_rate
    with open(root / MANIFEST, "w") as fh:
        for u in corpus:
            wav = f"wav/utt{u.id:06d}.wav"
            lab = f"labels/utt{u.id:06d}.txt"
            wavfile.write(root / wav, sr, np.asarray(u.samples, dtype=np.float32))
            (root / lab).write_text("\n".join(str(int(v)) for v in u.frame_labels) + "\n")
            row = {"id": u.id, "path": wav, "split": u.split, "is_positive": bool(u.is_positive),
                   "provenance": u.provenance, "frame_label_path": lab,
                   "duration_seconds": u.duration(sr)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    meta = {"seed": corpus.seed, "inventory": asdict(corpus.inventory),
            "frame_spec": corpus.frame_spec.to_dict(), **corpus.meta}
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_manifest(root):
    with open(Path(root) / MANIFEST) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_corpus(root):
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise CorpusError(f"no {MANIFEST} under {root}")
    meta = json.loads((root / "corpus.json").read_text())
    utts = []
    for row in read_manifest(root):
        _, samples = wavfile.read(root / row["path"])
        labels = np.array((root / row["frame_label_path"]).read_text().split(), dtype=np.int64)
        utts.append(Utterance(row["id"], samples, labels, row["is_positive"], row["provenance"], row["split"]))
    extra = {k: v for k, v in meta.items() if k not in ("seed", "inventory", "frame_spec")}
    return Corpus(utts, meta["seed"], TargetInventory(**meta["inventory"]),
                  FrameSpec(**meta["frame_spec"]), extra)


# -- feature-space toy set ---------------------------------------------------

def make_label_noise_set(seed, n_utterances=200, frames=(20, 40), dim=12,
                         noise_fraction=0.3, separation=2.0):
    """Two-class utterances drawn directly in feature space.

    Every frame of an utterance comes from the same class-conditional
    Gaussian.  A ``noise_fraction`` of utterances get every label flipped.
    Returns ``(features, labels, noisy_flags)`` with one entry per utterance.
    """
    rng = substream(seed, "toy")
    means = np.zeros((2, dim))
    means[1, :] = separation / np.sqrt(dim)
    noisy = np.zeros(n_utterances, dtype=bool)
    noisy[rng.choice(n_utterances, size=int(round(noise_fraction * n_utterances)), replace=False)] = True
    feats, labels = [], []
    for i in range(n_utterances):
        c = int(rng.integers(2))
        n = int(rng.integers(frames[0], frames[1] + 1))
        feats.append(means[c] + rng.standard_normal((n, dim)))
        labels.append(np.full(n, 1 - c if noisy[i] else c, dtype=np.int64))
    return feats, labels, noisy
