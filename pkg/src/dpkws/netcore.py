"""Feed-forward acoustic model with hand-written backward pass.

Each hidden block is ``linear -> batch norm -> sigmoid``; the output block
is a plain linear projection to logits.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class AcousticModel:
    """MLP ``input_dim -> hidden x n_layers -> n_classes``.

    Parameters live in ``self.params`` (trainable) and ``self.buffers``
    (batch-norm running statistics), both keyed by name in a fixed order.
    """

    def __init__(self, n_classes, input_dim=247, hidden=64, n_layers=5, seed=None, rng=None):
        self.n_classes = int(n_classes)
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.n_layers = int(n_layers)
        self.training = True
        self._version = 0
        if rng is None:
            rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}
        dims = self.dims
        for i in range(self.n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
            self.params[f"gamma{i}"] = np.ones(fan_out)
            self.params[f"beta{i}"] = np.zeros(fan_out)
            self.buffers[f"running_mean{i}"] = np.zeros(fan_out)
            self.buffers[f"running_var{i}"] = np.ones(fan_out)
        lim = np.sqrt(6.0 / (dims[-2] + dims[-1]))
        self.params["W_out"] = rng.uniform(-lim, lim, size=(dims[-2], dims[-1]))
        self.params["b_out"] = np.zeros(dims[-1])

    @property
    def dims(self):
        return [self.input_dim] + [self.hidden] * self.n_layers + [self.n_classes]

    def descriptor(self):
        return {
            "architecture": "mlp-bn-sigmoid",
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "bn_eps": BN_EPS,
            "bn_momentum": BN_MOMENTUM,
        }

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def mark_updated(self):
        self._version += 1

    def copy(self):
        other = AcousticModel.__new__(AcousticModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def forward(self, X, training=None):
        """Return ``(logits, cache)``.

        In training mode batch statistics normalise the pre-activations and
        the running statistics are updated in place.
        """
        training = self.training if training is None else training
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ShapeError("input must be a non-empty (n_frames, features) array")
        if X.shape[1] != self.input_dim:
            raise ShapeError(f"layer 0: expected input width {self.input_dim}, got {X.shape[1]}")
        cache = {"version": self._version, "training": training, "layers": []}
        h = X
        for i in range(self.n_layers):
            W, b = self.params[f"W{i}"], self.params[f"b{i}"]
            gamma, beta = self.params[f"gamma{i}"], self.params[f"beta{i}"]
            a = h @ W + b
            if training:
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                n = a.shape[0]
                rm, rv = self.buffers[f"running_mean{i}"], self.buffers[f"running_var{i}"]
                rm *= 1 - BN_MOMENTUM
                rm += BN_MOMENTUM * mu
                rv *= 1 - BN_MOMENTUM
                rv += BN_MOMENTUM * (var * n / (n - 1) if n > 1 else var)
            else:
                mu = self.buffers[f"running_mean{i}"]
                var = self.buffers[f"running_var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            out = _sigmoid(gamma * xhat + beta)
            cache["layers"].append((h, xhat, inv_std, out))
            h = out
        cache["last_hidden"] = h
        logits = h @ self.params["W_out"] + self.params["b_out"]
        return logits, cache

    def predict_logits(self, X):
        return self.forward(X, training=False)[0]

    def backward(self, cache, dlogits):
        """Gradients of a scalar loss given its gradient w.r.t. the logits.

        Returns ``(grads, dX)`` with ``grads`` keyed like ``self.params``.
        """
        if cache.get("version") != self._version:
            raise StaleCacheError("cache was produced before the last parameter update")
        dlogits = np.asarray(dlogits, dtype=np.float64)
        grads = {}
        h = cache["last_hidden"]
        grads["W_out"] = h.T @ dlogits
        grads["b_out"] = dlogits.sum(axis=0)
        dh = dlogits @ self.params["W_out"].T
        training = cache["training"]
        for i in reversed(range(self.n_layers)):
            h_in, xhat, inv_std, out = cache["layers"][i]
            gamma = self.params[f"gamma{i}"]
            dy = dh * out * (1.0 - out)
            grads[f"gamma{i}"] = (dy * xhat).sum(axis=0)
            grads[f"beta{i}"] = dy.sum(axis=0)
            dxhat = dy * gamma
            if training:
                n = dxhat.shape[0]
                da = inv_std / n * (n * dxhat - dxhat.sum(axis=0)
                                    - xhat * (dxhat * xhat).sum(axis=0))
            else:
                da = dxhat * inv_std
            grads[f"W{i}"] = h_in.T @ da
            grads[f"b{i}"] = da.sum(axis=0)
            dh = da @ self.params[f"W{i}"].T
        return {k: grads[k] for k in self.params}, dh

    def tensors(self):
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def save(self, path, hyperparameters=None):
        """Write the binary checkpoint and a JSON sidecar next to it."""
        write_container(path, "checkpoint", self.descriptor(), self.tensors())
        sidecar = {"descriptor": self.descriptor(), "hyperparameters": hyperparameters or {}}
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        desc, tensors = read_container(path, kind="checkpoint")
        model = cls(desc["n_classes"], desc["input_dim"], desc["hidden"], desc["n_layers"], seed=0)
        for name in model.params:
            model.params[name] = tensors[name]
        for name in model.buffers:
            model.buffers[name] = tensors[name]
        model.eval()
        return model


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model, grads, state, lr):
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"{name}: optimizer state shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.mark_updated()
    return model
