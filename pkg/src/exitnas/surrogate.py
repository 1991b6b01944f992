"""MLP regressors predicting validation error and average MACs from genomes.

Both models consume the flat integer encoding, min-max scaled per feature.
Error targets live in [0, 1]; MAC targets are converted to millions and
log-transformed before scaling because they span orders of magnitude.
Training is plain full/mini-batch gradient descent with momentum on a tiny
hand-rolled float64 network, which keeps fits deterministic and exposes the
analytic gradients the self-checks need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InsufficientDataError, ModelStateError
from .genome import Genome, SearchSpace, encode, gene_layout

SERIAL_VERSION = "surrogate/v1"

_MACS_LOG_FLOOR = 1e-9  # millions; guards log of a zero-cost candidate


@dataclass
class SurrogateHyper:
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_limit: int = 256     # full batch below this many samples
    momentum: float = 0.9
    one_hot: bool = False      # expand categorical genes instead of ordinal use

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ContractViolation("epochs must be >= 1 and learning_rate > 0")
        if any(h < 1 for h in self.hidden):
            raise ContractViolation("hidden layer sizes must be >= 1")


def gene_features(g: Genome, space: SearchSpace, one_hot: bool) -> np.ndarray:
    """Feature vector for one genome: option indices, or their one-hot expansion."""
    vec = encode(g, space)
    if not one_hot:
        return vec.astype(np.float64)
    sizes = [len(options) for _, options in gene_layout(space)]
    out = np.zeros(sum(sizes))
    offset = 0
    for idx, size in zip(vec, sizes):
        out[offset + int(idx)] = 1.0
        offset += size
    return out


class TinyMLP:
    """Fully connected ReLU network with one linear output, float64 end to end."""

    def __init__(self, input_dim, hidden=(64, 64), seed=0):
        rng = np.random.default_rng(seed)
        dims = [input_dim] + list(hidden) + [1]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            # small nonzero biases keep ReLU pre-activations off the exact
            # kink, where finite differences disagree with any subgradient
            self.biases.append(rng.uniform(-0.05, 0.05, size=fan_out))

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def forward(self, x):
        a = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        return (a @ self.weights[-1] + self.biases[-1])[:, 0]

    def loss_and_grads(self, x, y):
        """Mean-squared error and its gradients w.r.t. every parameter."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = x.shape[0]
        activations = [x]
        pre = []
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            pre.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        out = (a @ self.weights[-1] + self.biases[-1])[:, 0]
        diff = out - y
        loss = float(np.mean(diff ** 2))

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = (2.0 * diff / n)[:, None]
        grads_w[-1] = activations[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        back = delta @ self.weights[-1].T
        for l in range(len(self.weights) - 2, -1, -1):
            back = back * (pre[l] > 0.0)
            grads_w[l] = activations[l].T @ back
            grads_b[l] = back.sum(axis=0)
            if l > 0:
                back = back @ self.weights[l].T
        return loss, list(zip(grads_w, grads_b))

    def fit_data(self, x, y, hyper: SurrogateHyper, seed=0):
        """Gradient descent with momentum; returns the per-epoch loss curve."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = x.shape[0]
        rng = np.random.default_rng(seed)
        vel = [(np.zeros_like(w), np.zeros_like(b))
               for w, b in zip(self.weights, self.biases)]
        losses = []
        full_batch = n <= hyper.batch_limit
        for _ in range(hyper.epochs):
            if full_batch:
                batches = [np.arange(n)]
            else:
                order = rng.permutation(n)
                batches = [order[i:i + hyper.batch_limit]
                           for i in range(0, n, hyper.batch_limit)]
            epoch_loss = 0.0
            for idx in batches:
                loss, grads = self.loss_and_grads(x[idx], y[idx])
                epoch_loss += loss * len(idx)
                for l, (gw, gb) in enumerate(grads):
                    vw, vb = vel[l]
                    vw *= hyper.momentum
                    vw -= hyper.learning_rate * gw
                    vb *= hyper.momentum
                    vb -= hyper.learning_rate * gb
                    self.weights[l] += vw
                    self.biases[l] += vb
            losses.append(epoch_loss / n)
        return losses

    def predict(self, x):
        return self.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def to_dict(self):
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        model = cls.__new__(cls)
        model.weights = [np.asarray(w, dtype=np.float64) for w in d["weights"]]
        model.biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return model


def flatten_params(model: TinyMLP):
    return np.concatenate([w.ravel() for w in model.weights]
                          + [b.ravel() for b in model.biases])


def numerical_gradients(model: TinyMLP, x, y, eps=1e-6):
    """Central finite differences over every parameter, for self-checks."""
    grads = []
    for arr in model.weights + model.biases:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi, _ = model.loss_and_grads(x, y)
            flat[i] = orig - eps
            lo, _ = model.loss_and_grads(x, y)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


@dataclass
class _Scaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(lo=values.min(axis=0), hi=values.max(axis=0))

    def transform(self, values):
        values = np.asarray(values, dtype=np.float64)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        scaled = (values - self.lo) / safe
        return np.where(span > 0, scaled, 0.0)

    def inverse(self, scaled):
        return scaled * (self.hi - self.lo) + self.lo

    def to_dict(self):
        return {"lo": np.atleast_1d(self.lo).tolist(), "hi": np.atleast_1d(self.hi).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(lo=np.asarray(d["lo"], dtype=np.float64),
                   hi=np.asarray(d["hi"], dtype=np.float64))


@dataclass
class SurrogatePair:
    """Fitted error and MACs regressors plus the scaling that belongs to them."""

    error_model: TinyMLP = None
    macs_model: TinyMLP = None
    feature_scaler: _Scaler = None
    error_scaler: _Scaler = None
    macs_scaler: _Scaler = None
    training_archive_size: int = 0
    one_hot: bool = False
    error_loss_curve: list = field(default_factory=list)
    macs_loss_curve: list = field(default_factory=list)

    @property
    def is_fitted(self):
        return self.error_model is not None and self.macs_model is not None

    def to_dict(self):
        if not self.is_fitted:
            raise ModelStateError("cannot serialize an unfitted surrogate pair")
        return {
            "version": SERIAL_VERSION,
            "error_model": self.error_model.to_dict(),
            "macs_model": self.macs_model.to_dict(),
            "feature_scaler": self.feature_scaler.to_dict(),
            "error_scaler": self.error_scaler.to_dict(),
            "macs_scaler": self.macs_scaler.to_dict(),
            "training_archive_size": self.training_archive_size,
            "one_hot": self.one_hot,
            "error_loss_curve": list(self.error_loss_curve),
            "macs_loss_curve": list(self.macs_loss_curve),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SERIAL_VERSION:
            raise ModelStateError(f"unsupported surrogate blob version {d.get('version')!r}")
        return cls(
            error_model=TinyMLP.from_dict(d["error_model"]),
            macs_model=TinyMLP.from_dict(d["macs_model"]),
            feature_scaler=_Scaler.from_dict(d["feature_scaler"]),
            error_scaler=_Scaler.from_dict(d["error_scaler"]),
            macs_scaler=_Scaler.from_dict(d["macs_scaler"]),
            training_archive_size=int(d["training_archive_size"]),
            one_hot=bool(d.get("one_hot", False)),
            error_loss_curve=list(d.get("error_loss_curve", [])),
            macs_loss_curve=list(d.get("macs_loss_curve", [])),
        )


def _macs_target(avg_macs):
    return math.log(max(avg_macs / 1e6, _MACS_LOG_FLOOR))


def fit(archive, space: SearchSpace, hyper: SurrogateHyper = None, seed=0) -> SurrogatePair:
    """Train both regressors on the evaluated archive.

    ``archive`` is a sequence of objects with ``genome``, ``measured_error``
    and ``measured_average_macs`` attributes (raw MACs).
    """
    if hyper is None:
        hyper = SurrogateHyper()
    entries = list(archive)
    if len(entries) < 2:
        raise InsufficientDataError(f"need >= 2 archive entries, got {len(entries)}")
    features = np.array([gene_features(e.genome, space, hyper.one_hot) for e in entries])
    err = np.array([e.measured_error for e in entries], dtype=np.float64)
    macs = np.array([_macs_target(e.measured_average_macs) for e in entries], dtype=np.float64)
    if not (np.all(np.isfinite(err)) and np.all(np.isfinite(macs))):
        raise ContractViolation("archive targets must be finite")

    fscaler = _Scaler.fit(features)
    escaler = _Scaler.fit(err)
    mscaler = _Scaler.fit(macs)
    x = fscaler.transform(features)

    seed_rng = np.random.default_rng(seed)
    seeds = [int(seed_rng.integers(1 << 62)) for _ in range(4)]
    error_model = TinyMLP(x.shape[1], hyper.hidden, seed=seeds[0])
    macs_model = TinyMLP(x.shape[1], hyper.hidden, seed=seeds[1])
    err_curve = error_model.fit_data(x, escaler.transform(err), hyper, seed=seeds[2])
    macs_curve = macs_model.fit_data(x, mscaler.transform(macs), hyper, seed=seeds[3])
    return SurrogatePair(
        error_model=error_model,
        macs_model=macs_model,
        feature_scaler=fscaler,
        error_scaler=escaler,
        macs_scaler=mscaler,
        training_archive_size=len(entries),
        one_hot=hyper.one_hot,
        error_loss_curve=err_curve,
        macs_loss_curve=macs_curve,
    )


def predict(pair: SurrogatePair, g: Genome, space: SearchSpace):
    """Predicted (error, average MACs in millions), clamped to their domains."""
    if pair is None or not pair.is_fitted:
        raise ModelStateError("surrogate pair is not fitted")
    features = gene_features(g, space, pair.one_hot)[None, :]
    if features.shape[1] != pair.error_model.input_dim:
        raise ContractViolation(
            f"genome encodes to {features.shape[1]} genes, model expects "
            f"{pair.error_model.input_dim}"
        )
    x = pair.feature_scaler.transform(features)
    raw_err = float(pair.error_scaler.inverse(pair.error_model.predict(x))[0])
    raw_macs = float(pair.macs_scaler.inverse(pair.macs_model.predict(x))[0])
    error = min(max(raw_err, 0.0), 1.0)
    macs_millions = max(math.exp(raw_macs), 0.0)
    return error, macs_millions
