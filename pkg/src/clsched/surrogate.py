"""Trace-prediction surrogate: a small ReLU MLP mapping local belief, measurement
noise and the landmark's covariance trace to the trace of the updated covariance.

Everything is plain numpy. The network is a stack of fully connected layers
(ReLU hidden, linear output) trained on batch-mean squared error with Adam.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from clsched.errors import NumericalError, SchemaError
from clsched.motion import Belief

N_FEATURES = 16
SCHEMA_VERSION = 1
MODEL_FORMAT = "clsched-mlp"
FEATURE_LAYOUT = ["x", "y", "phi"] + [f"P{r}{c}" for r in range(3) for c in range(3)] + [
    "R00", "R01", "R11", "trace_Pj"]


def generate_input(bel_i: Belief, R, trace_pj: float) -> np.ndarray:
    """Raw (unnormalised) 16-feature vector.

    Order: estimate (3), full covariance row-major (9), R upper triangle (3),
    landmark covariance trace (1).
    """
    R = np.asarray(R, dtype=float)
    x = np.concatenate([
        bel_i.estimate.as_array(),
        bel_i.cov.ravel(),
        [R[0, 0], R[0, 1], R[1, 1]],
        [float(trace_pj)],
    ])
    if not np.all(np.isfinite(x)):
        raise ValueError("generate_input: non-finite input")
    return x


@dataclass
class TrainingSample:
    x: np.ndarray          # raw 16 features
    y: float               # trace of the updated covariance
    sample_id: int = -1
    context: object = None  # optional (bel_i, bel_j, z) for re-checking the label

    def __post_init__(self):
        if not self.y > 0:
            raise ValueError(f"training target must be positive, got {self.y}")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: tuple[int, ...] = ()  # features with zero variance (std forced to 1)


def fit_norm_stats(X) -> NormStats:
    """Per-feature z-score statistics (population std, i.e. divide by m)."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], TrainingSample):
        X = [s.x for s in X]
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two samples to fit normalisation statistics")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # rounding in the mean leaves ~1 ulp of spread in constant columns
    flagged = tuple(int(k) for k in np.flatnonzero(std <= 1e-12 * np.abs(mean)))
    if flagged:
        warnings.warn(f"zero-variance features {flagged}: std forced to 1", RuntimeWarning, stacklevel=2)
        idx = list(flagged)
        std[idx] = 1.0
        mean[idx] = X[0, idx]
    return NormStats(mean, std, flagged)


def normalize(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=float) - stats.mean) / stats.std


def denormalize(x, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=float) * stats.std + stats.mean


@dataclass
class TrainConfig:
    hidden_layers: int = 4
    hidden_units: int = 14
    activation: str = "relu"
    optimizer: str = "adam"
    loss: str = "mse"
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_units < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("layer counts, batch size and epochs must be positive")
        if not (self.learning_rate > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if (self.activation, self.optimizer, self.loss) != ("relu", "adam", "mse"):
            raise ValueError("only relu / adam / mse are supported")

    @property
    def layer_sizes(self) -> list[int]:
        return [N_FEATURES] + [self.hidden_units] * self.hidden_layers + [1]


@dataclass
class MlpModel:
    """Fully connected network. ``weights[k]`` has shape (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: NormStats
    adam_config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def activations(self) -> list[str]:
        return ["relu"] * (len(self.weights) - 1) + ["linear"]

    def predict_raw(self, x_raw) -> np.ndarray:
        """Forward pass on raw features (normalisation applied here)."""
        return forward_batch(self, normalize(np.atleast_2d(x_raw), self.norm))

    def __call__(self, bel_i: Belief, R, agent_id, trace_pj: float) -> float:
        return float(self.predict_raw(generate_input(bel_i, R, trace_pj))[0])


def init_model(layer_sizes: Sequence[int], norm: NormStats, rng: np.random.Generator) -> MlpModel:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(weights, biases, norm)


def _forward_cache(model: MlpModel, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        pre.append(z)
        a = z if k == last else np.maximum(z, 0.0)
        acts.append(a)
    return pre, acts


def forward_batch(model: MlpModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.weights[0].shape[1]:
        raise ValueError(f"expected {model.weights[0].shape[1]} features, got {X.shape[1]}")
    _, acts = _forward_cache(model, X)
    return acts[-1][:, 0]


def mlp_forward(model: MlpModel, x) -> float:
    """Scalar prediction for one normalised feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("mlp_forward takes a single feature vector")
    return float(forward_batch(model, x[None, :])[0])


def mlp_gradients(model: MlpModel, X, Y) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Backpropagated gradients of ``mean((Y - Yhat)^2)`` over the batch.

    Returns ``(dW, db, loss)`` with ``dW[k]``/``db[k]`` shaped like the layer's
    weights/biases.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(-1)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    if Y.shape[0] != m:
        raise ValueError("X and Y batch sizes differ")
    if X.shape[1] != model.weights[0].shape[1]:
        raise ValueError(f"expected {model.weights[0].shape[1]} features, got {X.shape[1]}")
    pre, acts = _forward_cache(model, X)
    resid = acts[-1][:, 0] - Y
    loss = float(np.mean(resid * resid))

    dW = [None] * len(model.weights)
    db = [None] * len(model.weights)
    delta = (2.0 / m) * resid[:, None]
    for k in range(len(model.weights) - 1, -1, -1):
        dW[k] = delta.T @ acts[k]
        db[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0.0)
    return dW, db, loss


@dataclass
class LossHistory:
    train: list[float] = field(default_factory=list)
    dev: list[float] = field(default_factory=list)


class TrainingDivergedError(NumericalError):
    pass


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple):
        X, Y = samples
        return np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    X = np.array([s.x for s in samples], dtype=float)
    Y = np.array([s.y for s in samples], dtype=float)
    return X, Y


def mse(model: MlpModel, X_norm: np.ndarray, Y: np.ndarray) -> float:
    r = forward_batch(model, X_norm) - Y
    return float(np.mean(r * r))


def train(samples, config: TrainConfig | None = None, dev_samples=None) -> tuple[MlpModel, LossHistory]:
    """Fit the surrogate with mini-batch Adam.

    ``samples`` is a list of TrainingSample or an ``(X_raw, Y)`` pair.
    Normalisation statistics are fitted on the training inputs and embedded
    in the model; targets stay in raw scale. Each epoch reshuffles the data
    with the seeded generator and keeps the final partial batch.
    """
    config = config or TrainConfig()
    X_raw, Y = _as_arrays(samples)
    norm = fit_norm_stats(X_raw)
    X = normalize(X_raw, norm)
    if dev_samples is not None:
        Xd_raw, Yd = _as_arrays(dev_samples)
        Xd = normalize(Xd_raw, norm)

    rng = np.random.default_rng(config.seed)
    model = init_model(config.layer_sizes, norm, rng)
    model.adam_config = {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps,
                         "learning_rate": config.learning_rate, "batch_size": config.batch_size,
                         "epochs": config.epochs}
    model.seed = config.seed

    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    step = 0
    history = LossHistory()
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            dW, db, _ = mlp_gradients(model, X[idx], Y[idx])
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, v1, v2 in zip(params, dW + db, m1, m2):
                v1 *= b1
                v1 += (1.0 - b1) * g
                v2 *= b2
                v2 += (1.0 - b2) * g * g
                p -= lr * (v1 / c1) / (np.sqrt(v2 / c2) + eps)
        loss = mse(model, X, Y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch + 1} (loss={loss}); try a smaller learning rate")
        history.train.append(loss)
        if dev_samples is not None:
            history.dev.append(mse(model, Xd, Yd))
    return model, history


def _float_list(a: np.ndarray):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "layer_sizes": model.layer_sizes,
        "activations": model.activations,
        "feature_layout": FEATURE_LAYOUT,
        "weights": [_float_list(W) for W in model.weights],
        "biases": [_float_list(b) for b in model.biases],
        "norm_mean": _float_list(model.norm.mean),
        "norm_std": _float_list(model.norm.std),
        "norm_std_convention": "population",
        "norm_flagged": list(model.norm.flagged),
        "adam_config": dict(model.adam_config),
        "seed": model.seed,
    }


def model_from_dict(doc: dict) -> MlpModel:
    try:
        if doc.get("format") != MODEL_FORMAT:
            raise SchemaError(f"not a {MODEL_FORMAT} document")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {doc.get('schema_version')!r}")
        sizes = [int(s) for s in doc["layer_sizes"]]
        n_layers = len(sizes) - 1
        if n_layers < 1 or len(doc["weights"]) != n_layers or len(doc["biases"]) != n_layers:
            raise SchemaError(f"layer_sizes {sizes} disagree with the number of weight/bias arrays")
        if doc["activations"] != ["relu"] * (n_layers - 1) + ["linear"]:
            raise SchemaError(f"unsupported activations {doc['activations']}")
        weights = [np.array(w, dtype=float) for w in doc["weights"]]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        for k, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise SchemaError(f"layer {k}: weight {W.shape} / bias {b.shape} do not match layer_sizes")
        mean = np.array(doc["norm_mean"], dtype=float)
        std = np.array(doc["norm_std"], dtype=float)
        if mean.shape != (sizes[0],) or std.shape != (sizes[0],) or np.any(std <= 0):
            raise SchemaError("normalisation statistics do not match the input layer")
        norm = NormStats(mean, std, tuple(int(k) for k in doc.get("norm_flagged", [])))
        return MlpModel(weights, biases, norm, dict(doc.get("adam_config", {})), doc.get("seed"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed model document: {exc}") from None


def dumps_model(model: MlpModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: corrupt model file ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: model file must hold a JSON object")
    return model_from_dict(doc)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
