"""Class and instance data parameters.

Every training frame gets a temperature ``sigma_star`` equal to the sum of
the parameter of its target class and the parameter of its utterance.  All
logits of the frame are divided by that temperature before the softmax.
The parameters are stored in the log domain and trained with plain SGD.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CLASS_CLIP = (0.05, 20.0)
INSTANCE_CLIP = (0.0001, 20.0)
# Non-target mass is summed directly, so it keeps full relative precision
# until it underflows; only then is the q-distribution undefined.
CANCELLATION_EPS = 1e-8
SATURATION_EPS = np.finfo(np.float64).tiny


class DataParameterError(ValueError):
    pass


@dataclass
class DataParameterStore:
    """Log-domain class and instance temperatures.

    Parameters
    ----------
    log_class_sigma : ndarray of shape (n_classes,)
    log_instance_sigma : ndarray of shape (n_instances,)
    class_enabled, instance_enabled : bool
        Select class-only, instance-only or joint mode. With both disabled
        every frame uses ``sigma_star = 1``.
    """

    log_class_sigma: np.ndarray
    log_instance_sigma: np.ndarray
    class_enabled: bool = True
    instance_enabled: bool = False
    class_clip: tuple = CLASS_CLIP
    instance_clip: tuple = INSTANCE_CLIP
    momentum: float = 0.0
    class_velocity: np.ndarray = field(default=None, repr=False)
    instance_velocity: np.ndarray = field(default=None, repr=False)
    skipped_updates: int = 0

    def __post_init__(self):
        self.log_class_sigma = np.asarray(self.log_class_sigma, dtype=np.float64).copy()
        self.log_instance_sigma = np.asarray(self.log_instance_sigma, dtype=np.float64).copy()
        if self.class_velocity is None:
            self.class_velocity = np.zeros_like(self.log_class_sigma)
        if self.instance_velocity is None:
            self.instance_velocity = np.zeros_like(self.log_instance_sigma)

    @classmethod
    def create(cls, n_classes, n_instances, class_init=1.0, instance_init=1.0,
               class_enabled=True, instance_enabled=False, momentum=0.0):
        return cls(
            log_class_sigma=np.full(n_classes, np.log(class_init)),
            log_instance_sigma=np.full(n_instances, np.log(instance_init)),
            class_enabled=class_enabled,
            instance_enabled=instance_enabled,
            momentum=momentum,
        )

    @property
    def n_classes(self):
        return self.log_class_sigma.shape[0]

    @property
    def n_instances(self):
        return self.log_instance_sigma.shape[0]

    @property
    def class_sigma(self):
        return _to_value(self.log_class_sigma, self.class_clip)

    @property
    def instance_sigma(self):
        return _to_value(self.log_instance_sigma, self.instance_clip)

    def copy(self):
        return DataParameterStore(
            self.log_class_sigma.copy(), self.log_instance_sigma.copy(),
            self.class_enabled, self.instance_enabled, self.class_clip,
            self.instance_clip, self.momentum, self.class_velocity.copy(),
            self.instance_velocity.copy(), self.skipped_updates,
        )


def _to_value(log_values, clip):
    # exp(log(bound)) misses the bound by an ulp, so log values sitting on a
    # clipped bound map back to the bound itself.
    lo, hi = clip
    v = np.clip(np.exp(log_values), lo, hi)
    v[log_values <= np.log(lo)] = lo
    v[log_values >= np.log(hi)] = hi
    return v


def _check_ids(ids, n, what):
    ids = np.asarray(ids)
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise DataParameterError(f"{what} id {int(bad.flat[0])} out of range [0, {n})")
    return ids


def effective_sigma(store, class_id, instance_id):
    """Per-frame temperature ``sigma_star``; vectorised over the ids."""
    class_id = _check_ids(class_id, store.n_classes, "class")
    instance_id = _check_ids(instance_id, store.n_instances, "instance")
    if not (store.class_enabled or store.instance_enabled):
        return np.ones(np.broadcast(class_id, instance_id).shape)[()]
    out = np.zeros(np.broadcast(class_id, instance_id).shape)
    if store.class_enabled:
        out = out + store.class_sigma[class_id]
    if store.instance_enabled:
        out = out + store.instance_sigma[instance_id]
    return out[()]


def _check_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DataParameterError("non-finite logits")
    return z


def scaled_softmax(logits, target, sigma_star):
    """Softmax of ``logits / sigma_star``.

    ``target`` is accepted for symmetry with the loss; the temperature is
    already the one selected by the frame's target class and utterance.
    """
    z = _check_logits(logits)
    if z.shape[-1] < 2:
        raise DataParameterError("need at least two classes")
    if np.any(np.asarray(sigma_star) <= 0):
        raise DataParameterError("sigma_star must be positive")
    sig = np.asarray(sigma_star, dtype=np.float64)
    s = z / (sig[..., None] if z.ndim > 1 else sig)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _non_target_mass(p, targets):
    """``1 - p_y`` summed over non-target classes to avoid cancellation."""
    mask = np.ones_like(p, dtype=bool)
    mask[np.arange(p.shape[0]), targets] = False
    return np.where(mask, p, 0.0).sum(axis=1), mask


def _target_grad(p, rows, targets, rest):
    """``p - onehot``; the target entry switches to ``-rest`` once ``p_y - 1`` cancels."""
    g = p.copy()
    g[rows, targets] -= 1.0
    tiny = rest < CANCELLATION_EPS
    g[rows[tiny], targets[tiny]] = -rest[tiny]
    return g


def non_target_distribution(logits, target, sigma_star):
    """Scaled-softmax mass over non-target classes, renormalised to sum to one.

    The target entry is zero.  Returns ``None`` when the frame is saturated.
    """
    z = np.atleast_2d(_check_logits(logits))
    p = scaled_softmax(z, None, np.atleast_1d(sigma_star))
    rest, mask = _non_target_mass(p, [target])
    if rest[0] < SATURATION_EPS:
        return None
    return np.where(mask, p, 0.0)[0] / rest[0]


def sigma_star_gradients(logits, targets, sigma_stars):
    """Gradient of each frame's ``-log p_y`` with respect to its ``sigma_star``.

    Returns ``(grads, saturated)`` where ``saturated`` flags frames whose
    non-target mass underflowed; their gradient is set to zero.
    """
    z = _check_logits(logits)
    targets = np.asarray(targets, dtype=np.intp)
    sig = np.asarray(sigma_stars, dtype=np.float64)
    p = scaled_softmax(z, targets, sig)
    rest, mask = _non_target_mass(p, targets)
    saturated = rest < SATURATION_EPS
    safe_rest = np.where(saturated, 1.0, rest)
    q = np.where(mask, p, 0.0) / safe_rest[:, None]
    z_y = z[np.arange(z.shape[0]), targets]
    bracket = z_y - (q * z).sum(axis=1)
    grads = rest / sig**2 * bracket
    grads[saturated] = 0.0
    return grads, saturated


def sigma_gradient(logits, target, sigma_star):
    """Scalar version of :func:`sigma_star_gradients` for one frame."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    grads, saturated = sigma_star_gradients(z, [target], [sigma_star])
    if saturated[0]:
        logger.debug("sigma gradient saturated (p_target ~ 1)")
    return float(grads[0])


@dataclass
class ScaledLossResult:
    loss: float
    logit_grads: np.ndarray
    sigma_star_grads: np.ndarray
    per_frame_sigma_star: np.ndarray
    n_saturated: int = 0


def dp_cross_entropy(logits_batch, targets, sigma_stars):
    """Frame-mean cross entropy of the temperature-scaled softmax.

    Both returned gradients already include the ``1 / n_frames`` factor of
    the mean reduction.
    """
    z = _check_logits(logits_batch)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DataParameterError("empty batch")
    targets = np.asarray(targets, dtype=np.intp)
    sig = np.broadcast_to(np.asarray(sigma_stars, dtype=np.float64), targets.shape).copy()
    if targets.shape[0] != z.shape[0]:
        raise DataParameterError("one target per frame required")
    if np.any(sig <= 0):
        raise DataParameterError("sigma_star must be positive")
    n = z.shape[0]
    rows = np.arange(n)

    s = z / sig[:, None]
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    nll = np.log(denom[:, 0]) - s[rows, targets]

    rest, mask = _non_target_mass(p, targets)
    g = _target_grad(p, rows, targets, rest)
    g /= sig[:, None]
    g /= n

    saturated = rest < SATURATION_EPS
    q = np.where(mask, p, 0.0) / np.where(saturated, 1.0, rest)[:, None]
    bracket = z[rows, targets] - (q * z).sum(axis=1)
    sg = rest / sig**2 * bracket
    sg[saturated] = 0.0
    sg /= n

    return ScaledLossResult(
        loss=float(nll.mean()),
        logit_grads=g,
        sigma_star_grads=sg,
        per_frame_sigma_star=sig,
        n_saturated=int(saturated.sum()),
    )


def softmax_cross_entropy(logits_batch, targets):
    """Plain frame-mean cross entropy and its logit gradient."""
    z = np.asarray(logits_batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    n = z.shape[0]
    rows = np.arange(n)
    s = z - z.max(axis=1, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    loss = float((np.log(denom[:, 0]) - s[rows, targets]).mean())
    g = _target_grad(p, rows, targets, _non_target_mass(p, targets)[0])
    g /= n
    return loss, g


def data_parameter_gradients(store, sigma_star_grads, class_ids, instance_ids,
                             sigma_stars, weight_decay=0.0):
    """Accumulate log-domain gradients for the class and instance parameters.

    ``sigma_star_grads`` are per-frame value-domain gradients.  The penalty
    ``weight_decay * log(sigma_star)**2`` is added once per frame.
    """
    class_ids = np.asarray(class_ids, dtype=np.intp)
    instance_ids = np.asarray(instance_ids, dtype=np.intp)
    sig = np.asarray(sigma_stars, dtype=np.float64)
    g = np.asarray(sigma_star_grads, dtype=np.float64)
    if weight_decay:
        g = g + weight_decay * 2.0 * np.log(sig) / sig

    grad_class = np.zeros(store.n_classes)
    grad_inst = np.zeros(store.n_instances)
    if store.class_enabled:
        # d sigma_star / d log sigma_class = sigma_class
        grad_class = np.bincount(class_ids, g * store.class_sigma[class_ids],
                                 minlength=store.n_classes)
    if store.instance_enabled:
        grad_inst = np.bincount(instance_ids, g * store.instance_sigma[instance_ids],
                                minlength=store.n_instances)
    return grad_class, grad_inst


def _sgd(log_values, velocity, grad, lr, momentum, clip):
    finite = np.isfinite(grad)
    n_bad = int((~finite).sum())
    grad = np.where(finite, grad, 0.0)
    if momentum:
        velocity[finite] = momentum * velocity[finite] + grad[finite]
        step = np.where(finite, velocity, 0.0)
    else:
        step = grad
    new = log_values - lr * step
    lo, hi = clip
    log_values[:] = np.clip(np.where(finite, new, log_values), np.log(lo), np.log(hi))
    return n_bad


def update_data_parameters(store, class_grads, instance_grads, class_lr, instance_lr):
    """One SGD step on the log parameters followed by value-domain clipping.

    Gradients are log-domain (see :func:`data_parameter_gradients`).  Entries
    with non-finite gradients are left untouched and counted in
    ``store.skipped_updates``.  Returns ``store``.
    """
    n_bad = 0
    if store.class_enabled:
        n_bad += _sgd(store.log_class_sigma, store.class_velocity,
                      np.asarray(class_grads, dtype=np.float64), class_lr,
                      store.momentum, store.class_clip)
    if store.instance_enabled:
        n_bad += _sgd(store.log_instance_sigma, store.instance_velocity,
                      np.asarray(instance_grads, dtype=np.float64), instance_lr,
                      store.momentum, store.instance_clip)
    if n_bad:
        store.skipped_updates += n_bad
        logger.warning("skipped %d data-parameter updates with non-finite gradients", n_bad)
    return store


SNAPSHOT_COLUMNS = ("epoch", "kind", "id", "sigma_value")


def snapshot_rows(store, epoch, instance_ids=None):
    """Rows ``(epoch, kind, id, sigma)`` for every enabled parameter family.

    ``instance_ids`` maps instance index to the utterance id written out.
    """
    rows = []
    if store.class_enabled:
        rows += [(epoch, "class", k, float(v)) for k, v in enumerate(store.class_sigma)]
    if store.instance_enabled:
        ids = range(store.n_instances) if instance_ids is None else instance_ids
        rows += [(epoch, "instance", int(i), float(v)) for i, v in zip(ids, store.instance_sigma)]
    return rows


def write_snapshot_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_COLUMNS)
        for epoch, kind, ident, value in rows:
            w.writerow((epoch, kind, ident, repr(float(value))))


def read_snapshot_csv(path):
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), r["kind"], int(r["id"]), float(r["sigma_value"]))
                for r in csv.DictReader(fh)]
