"""Minibatch training of the acoustic model with optional data parameters.

Model weights follow Adam with a plateau-halved learning rate; class and
instance temperatures follow plain SGD at a fixed learning rate.  All
randomness comes from named substreams of one master seed.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .dataparams import (
    DataParameterStore,
    data_parameter_gradients,
    dp_cross_entropy,
    effective_sigma,
    snapshot_rows,
    softmax_cross_entropy,
    update_data_parameters,
    write_snapshot_csv,
)
from .features import FrameSpec, utterance_features
from .netcore import AcousticModel, AdamState, adam_step

logger = logging.getLogger(__name__)

MODES = ("baseline", "class", "instance", "joint")

# (data condition, mode) -> data-parameter hyperparameters
TABLE1 = {
    ("clean", "class"): dict(class_lr=0.001, class_init=1.0, weight_decay=0.01),
    ("clean", "instance"): dict(instance_lr=0.001, instance_init=1.0, weight_decay=0.01),
    ("clean", "joint"): dict(class_lr=0.001, class_init=1.0, instance_lr=0.1,
                             instance_init=0.01, weight_decay=0.01),
    ("noisy", "class"): dict(class_lr=0.001, class_init=1.0, weight_decay=0.01),
    ("noisy", "instance"): dict(instance_lr=0.01, instance_init=1.0, weight_decay=0.1),
    ("noisy", "joint"): dict(class_lr=0.001, class_init=1.0, instance_lr=1.0,
                             instance_init=0.1, weight_decay=0.01),
}


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "baseline"
    class_lr: float = 0.001
    class_init: float = 1.0
    instance_lr: float = 0.001
    instance_init: float = 1.0
    weight_decay: float = 0.01
    dp_momentum: float = 0.0
    model_lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    early_stop_patience: int = 9
    batch_utterances: int = 256
    max_epochs: int = 50
    hidden: int = 64
    n_layers: int = 5
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    @property
    def class_enabled(self):
        return self.mode in ("class", "joint")

    @property
    def instance_enabled(self):
        return self.mode in ("instance", "joint")

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("class_lr", "instance_lr", "weight_decay", "dp_momentum"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative")
        for name in ("model_lr", "class_init", "instance_init", "adam_eps"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError("betas must be two values in [0, 1)")
        if not 0 < self.plateau_factor <= 1:
            raise ConfigError("plateau_factor must be in (0, 1]")
        for name in ("plateau_patience", "early_stop_patience", "batch_utterances",
                     "max_epochs", "hidden", "n_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mode == "joint" and not 0.9 - 1e-12 <= self.class_init + self.instance_init <= 1.1 + 1e-12:
            raise ConfigError("joint mode: class_init + instance_init must lie within [0.9, 1.1]")

    @classmethod
    def for_table1(cls, mode, data="clean", **overrides):
        """Config with the ``TABLE1`` data-parameter defaults for ``(data, mode)``."""
        if data not in ("clean", "noisy"):
            raise ConfigError(f"data must be 'clean' or 'noisy', got {data!r}")
        params = dict(TABLE1.get((data, mode), {}))
        params.update(overrides)
        return cls(mode=mode, **params)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FrameData:
    """Per-utterance stacked features and frame targets."""

    features: list
    labels: list
    ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.features) == len(self.labels) == len(self.ids)):
            raise ValueError("features, labels and ids must have equal length")
        for uid, X, y in zip(self.ids, self.features, self.labels):
            if X.shape[0] != len(y):
                raise ValueError(f"utterance {uid}: {X.shape[0]} feature frames vs {len(y)} labels")

    def __len__(self):
        return len(self.ids)

    @property
    def n_frames(self):
        return int(sum(len(y) for y in self.labels))

    @classmethod
    def from_utterances(cls, utterances, frame_spec=None):
        spec = frame_spec or FrameSpec()
        feats, labels, ids = [], [], []
        for u in utterances:
            feats.append(utterance_features(u.samples, spec))
            labels.append(np.asarray(u.frame_labels, dtype=np.intp))
            ids.append(u.id)
        return cls(feats, labels, np.array(ids, dtype=np.int64))


def batch_schedule(n_utterances, batch_utterances, rng):
    """Shuffled utterance indices split into consecutive batches (last one kept)."""
    order = rng.permutation(n_utterances)
    return [order[i:i + batch_utterances] for i in range(0, n_utterances, batch_utterances)]


def _gather(data, idx):
    X = np.concatenate([data.features[i] for i in idx])
    y = np.concatenate([data.labels[i] for i in idx])
    inst = np.repeat(idx, [len(data.labels[i]) for i in idx])
    return X, y, inst


def cv_loss(model, data, chunk_utterances=512):
    """Mean per-frame unscaled cross entropy with inference-mode batch norm."""
    if len(data) == 0:
        raise ValueError("empty cross-validation set")
    total, n = 0.0, 0
    for start in range(0, len(data), chunk_utterances):
        idx = np.arange(start, min(start + chunk_utterances, len(data)))
        X, y, _ = _gather(data, idx)
        loss, _ = softmax_cross_entropy(model.forward(X, training=False)[0], y)
        total += loss * len(y)
        n += len(y)
    return total / n


class PlateauSchedule:
    """Halve the model lr after ``patience`` epochs without a new best cv loss.

    An epoch improves only if its cv loss is strictly below the best so far.
    ``should_stop`` turns on after ``stop_patience`` non-improving epochs in a row.
    """

    def __init__(self, lr, factor=0.5, patience=2, stop_patience=9):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.stop_patience = stop_patience
        self.best = np.inf
        self.since_best = 0
        self._since_decay = 0

    @property
    def should_stop(self):
        return self.since_best >= self.stop_patience

    def step(self, loss):
        """Record one epoch's cv loss; return True if it is a new best."""
        if loss < self.best:
            self.best = loss
            self.since_best = self._since_decay = 0
            return True
        self.since_best += 1
        self._since_decay += 1
        if self._since_decay >= self.patience:
            self.lr *= self.factor
            self._since_decay = 0
        return False


@dataclass
class TrainResult:
    model: AcousticModel
    store: DataParameterStore
    log: list
    snapshots: list
    best_epoch: int
    batch_losses: list = field(default_factory=list)
    final_model: AcousticModel = None


def _log_epoch(path, entry):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def train(config, train_data, cv_data, n_classes=20, model=None, run_dir=None):
    """Train until early stopping or ``config.max_epochs``.

    Returns a :class:`TrainResult` holding the model and data parameters of
    the epoch with the lowest cv loss (the last-epoch model is kept in
    ``final_model``), the per-epoch log, per-batch losses and the sigma
    snapshots (epoch 0 is the initial state).  With ``run_dir`` the log is
    appended to ``train_log.jsonl`` and snapshots go to
    ``sigmas/epoch_NNN.csv``; baseline runs write no snapshots.
    """
    config.validate()
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = AcousticModel(n_classes, train_data.features[0].shape[1], config.hidden,
                              config.n_layers, rng=substream(config.seed, "init"))
    model.train()
    shuffle_rng = substream(config.seed, "shuffle")
    adam = AdamState(beta1=config.betas[0], beta2=config.betas[1], eps=config.adam_eps)
    store = DataParameterStore.create(
        model.n_classes, len(train_data),
        class_init=config.class_init, instance_init=config.instance_init,
        class_enabled=config.class_enabled, instance_enabled=config.instance_enabled,
        momentum=config.dp_momentum)
    use_dp = config.mode != "baseline"

    log_path = snap_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.jsonl"
        log_path.write_text("")
        if use_dp:
            snap_dir = run_dir / "sigmas"
            snap_dir.mkdir(exist_ok=True)

    snapshots = []

    def snapshot(epoch):
        if not use_dp:
            return
        rows = snapshot_rows(store, epoch, instance_ids=train_data.ids)
        snapshots.extend(rows)
        if snap_dir is not None:
            write_snapshot_csv(snap_dir / f"epoch_{epoch:03d}.csv", rows)

    snapshot(0)
    sched = PlateauSchedule(config.model_lr, config.plateau_factor, config.plateau_patience,
                            config.early_stop_patience)
    best_model, best_store, best_epoch = model.copy(), store.copy(), 0
    log, batch_losses = [], []
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        model.train()
        frame_loss, n_frames = 0.0, 0
        for b, idx in enumerate(batch_schedule(len(train_data), config.batch_utterances, shuffle_rng)):
            X, y, inst = _gather(train_data, idx)
            logits, cache = model.forward(X, training=True)
            if use_dp:
                sig = effective_sigma(store, y, inst)
                res = dp_cross_entropy(logits, y, sig)
                loss, dlogits = res.loss, res.logit_grads
            else:
                loss, dlogits = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss {loss} at epoch {epoch}, batch {b} "
                    f"(utterances {train_data.ids[idx[:5]].tolist()}..., {len(y)} frames, "
                    f"max |logit| {np.max(np.abs(logits)):.3g})")
            batch_losses.append(loss)
            grads, _ = model.backward(cache, dlogits)
            adam_step(model, grads, adam, lr)
            if use_dp:
                gc, gi = data_parameter_gradients(store, res.sigma_star_grads, y, inst, sig,
                                                  config.weight_decay)
                update_data_parameters(store, gc, gi, config.class_lr, config.instance_lr)
            frame_loss += loss * len(y)
            n_frames += len(y)

        cv = cv_loss(model, cv_data)
        if not np.isfinite(cv):
            raise TrainingError(f"non-finite cv loss at epoch {epoch}")
        if sched.step(cv):
            best_model, best_store, best_epoch = model.copy(), store.copy(), epoch
        entry = {"epoch": epoch, "train_loss": frame_loss / n_frames, "cv_loss": cv,
                 "model_lr": lr, "stopped_early": sched.should_stop}
        snapshot(epoch)
        log.append(entry)
        _log_epoch(log_path, entry)
        logger.info("epoch %d train %.5f cv %.5f lr %.3g", epoch, entry["train_loss"], cv, lr)
        if sched.should_stop:
            break

    best_model.eval()
    model.eval()
    return TrainResult(best_model, best_store, log, snapshots, best_epoch, batch_losses, model)


def predict_posteriors(model, features):
    """Frame posteriors (plain softmax, inference mode) for one utterance."""
    z = model.forward(features, training=False)[0]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
