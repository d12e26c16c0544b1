"""Heteroscedastic age regressor.

A dense tanh network with a two-node head ``[mean_age, log_variance]``.
Sex is appended to the trunk output before the last two dense layers::

    x (d) -> tanh dense h_1 -> ... -> tanh dense h_m -> [., sex]
          -> tanh dense (fusion) -> linear dense (2)

The head is read out as

    mean_age     = target_shift + target_scale * out[0]
    log_variance = clip(logvar_shift + out[1], LOGVAR_MIN, LOGVAR_MAX)

``target_shift``/``target_scale``/``logvar_shift`` are frozen buffers fixed at
initialisation from the training labels (or 0/1/0 when normalisation is off),
so raw outputs stay O(1) while predictions are in years.

The objective is the Gaussian negative log-likelihood averaged over chunks,
``(ca - mean)^2 exp(-s) / 2 + s / 2`` with ``s = log sigma^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import BACKEND, kernels
from .errors import ConfigError, TrainingError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
CHECKPOINT_FORMAT = "bioage-hetreg"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ChunkPrediction:
    mean_age: float
    log_variance: float

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.log_variance)


@dataclass
class TrainConfig:
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 32])
    fusion_width: int = 16
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 1.0
    normalize_targets: bool = True
    # "all", or "head_bias" for the constant-predictor model
    trainable: str = "all"
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes", "layer widths must be >= 1")
        if self.fusion_width < 1:
            raise ConfigError("fusion_width", "must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "moment decay rates must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps", "must be > 0")
        if not self.init_scale >= 0:
            raise ConfigError("init_scale", "must be >= 0")
        if self.trainable not in ("all", "head_bias"):
            raise ConfigError("trainable", "must be 'all' or 'head_bias'")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Layer weights (fan_in, fan_out) and biases, plus frozen head buffers.

    All weights and biases are views into one contiguous ``flat`` buffer laid
    out as W0, b0, W1, b1, ...; the kernels operate on that buffer directly.
    Sex is concatenated to the input of layer ``fusion_index`` (the second to
    last layer).
    """

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        target_shift: float = 0.0,
        target_scale: float = 1.0,
        logvar_shift: float = 0.0,
        train_config: TrainConfig | None = None,
        loss_history: Sequence[float] = (),
    ):
        if len(weights) < 2 or len(weights) != len(biases):
            raise ValueError("need at least a fusion and an output layer")
        self.dims = tuple((int(W.shape[0]), int(W.shape[1])) for W in weights)
        for i, ((fi, fo), b) in enumerate(zip(self.dims, biases)):
            if np.shape(b) != (fo,):
                raise ValueError(f"layer {i}: bias shape {np.shape(b)} != ({fo},)")
            if i > 0 and fi != self.dims[i - 1][1] + (1 if i == len(weights) - 2 else 0):
                raise ValueError(f"layer {i}: fan_in {fi} inconsistent with previous layer")
        if self.dims[-1][1] != 2:
            raise ValueError("output layer must have two units")
        self.flat = np.concatenate(
            [np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in zip(weights, biases)]
        ).astype(np.float64)
        self.weights, self.biases = [], []
        off = 0
        for fi, fo in self.dims:
            self.weights.append(self.flat[off : off + fi * fo].reshape(fi, fo))
            off += fi * fo
            self.biases.append(self.flat[off : off + fo])
            off += fo
        self.target_shift = float(target_shift)
        self.target_scale = float(target_scale)
        self.logvar_shift = float(logvar_shift)
        self.train_config = train_config
        self.loss_history = list(loss_history)

    @property
    def fusion_index(self) -> int:
        return len(self.dims) - 2

    @property
    def input_dim(self) -> int:
        return self.dims[0][0] - (1 if self.fusion_index == 0 else 0)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in flat-buffer order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        """Split a flat gradient-like buffer into per-array views."""
        out, off = [], 0
        for fi, fo in self.dims:
            out.append(flat[off : off + fi * fo].reshape(fi, fo))
            off += fi * fo
            out.append(flat[off : off + fo])
            off += fo
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.weights,
            self.biases,
            self.target_shift,
            self.target_scale,
            self.logvar_shift,
            self.train_config,
            self.loss_history,
        )

    def to_bytes(self) -> bytes:
        """Canonical byte form of parameters and buffers (for equality checks)."""
        head = np.asarray([self.target_shift, self.target_scale, self.logvar_shift])
        return head.tobytes() + self.flat.tobytes()


def layer_shapes(input_dim: int, hidden_sizes: Sequence[int], fusion_width: int) -> list[tuple[int, int]]:
    widths = [input_dim, *hidden_sizes]
    shapes = [(widths[i], widths[i + 1]) for i in range(len(hidden_sizes))]
    shapes.append((widths[-1] + 1, fusion_width))
    shapes.append((fusion_width, 2))
    return shapes


def init_params(input_dim: int, config: TrainConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights scaled by ``config.init_scale``, zero biases."""
    weights, biases = [], []
    shapes = layer_shapes(input_dim, config.hidden_sizes, config.fusion_width)
    for fan_in, fan_out in shapes:
        a = config.init_scale * math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if config.trainable == "head_bias":
        weights[-1][:] = 0.0
    return ModelParams(weights, biases, train_config=config)


def zero_params(input_dim: int, hidden_sizes: Sequence[int] = (64, 32), fusion_width: int = 16) -> ModelParams:
    shapes = layer_shapes(input_dim, hidden_sizes, fusion_width)
    return ModelParams(
        [np.zeros(s) for s in shapes], [np.zeros(s[1]) for s in shapes], 0.0, 0.0, 0.0
    )


# -- forward ------------------------------------------------------------------

def _check_inputs(params: ModelParams, X: np.ndarray, sex: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"chunk dimension {X.shape[-1]} does not match model input {params.input_dim}")
    if sex.shape != (X.shape[0],):
        raise ValueError("need one sex value per chunk")


def _forward_cache(params: ModelParams, X: np.ndarray, sex: np.ndarray):
    inputs = []
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if i == params.fusion_index:
            h = np.concatenate([h, sex[:, None]], axis=1)
        inputs.append(h)
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        if i != last:
            inputs.append(h)  # keep activation for the tanh derivative
    raw = h
    mean = params.target_shift + params.target_scale * raw[:, 0]
    s_raw = params.logvar_shift + raw[:, 1]
    return mean, s_raw, inputs


def forward_batch(params: ModelParams, X, sex) -> tuple[np.ndarray, np.ndarray]:
    """Predict ``(mean_age, log_variance)`` for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sex = np.broadcast_to(np.asarray(sex, dtype=np.float64), (X.shape[0],))
    _check_inputs(params, X, sex)
    mean, s_raw, _ = _forward_cache(params, X, sex)
    return mean, np.clip(s_raw, LOGVAR_MIN, LOGVAR_MAX)


def forward(params: ModelParams, chunk, sex: int) -> ChunkPrediction:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 1:
        raise ValueError("forward expects a single chunk vector")
    mean, s = forward_batch(params, chunk[None, :], [sex])
    return ChunkPrediction(float(mean[0]), float(s[0]))


# -- loss and gradients -------------------------------------------------------

def nll_terms(mean, log_variance, labels) -> np.ndarray:
    mean, s, y = (np.asarray(a, dtype=np.float64) for a in (mean, log_variance, labels))
    return 0.5 * (y - mean) ** 2 * np.exp(-s) + 0.5 * s


def nll_loss(predictions: Sequence[ChunkPrediction], labels: Sequence[float]) -> float:
    """Mean Gaussian NLL over chunks (constant term dropped)."""
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ValueError("predictions and labels must be non-empty and of equal length")
    mean = [p.mean_age for p in predictions]
    s = [p.log_variance for p in predictions]
    return float(np.mean(nll_terms(mean, s, labels)))


class Batch(NamedTuple):
    X: np.ndarray  # (n, d)
    sex: np.ndarray  # (n,)
    ca: np.ndarray  # (n,)


def as_batch(data) -> Batch:
    """Accept a :class:`Batch` or a sequence of ``(chunk, sex, ca)`` triples."""
    if isinstance(data, Batch):
        return data
    data = list(data)
    if not data:
        raise ValueError("empty dataset")
    X = np.array([np.asarray(c, dtype=np.float64) for c, _, _ in data])
    return Batch(X, np.array([s for _, s, _ in data], dtype=np.float64), np.array([y for _, _, y in data], dtype=np.float64))


def batch_loss(params: ModelParams, batch) -> float:
    b = as_batch(batch)
    mean, s = forward_batch(params, b.X, b.sex)
    return float(np.mean(nll_terms(mean, s, b.ca)))


def loss_and_gradients(params: ModelParams, batch) -> tuple[float, list[np.ndarray]]:
    """Loss and exact gradients, ordered like :meth:`ModelParams.arrays`."""
    b = as_batch(batch)
    X, sex, ca = _contiguous(b)
    _check_inputs(params, X, sex)
    grad = np.empty_like(params.flat)
    loss = _loss_grad_flat(params, X, sex, ca, grad)
    return loss, params.unflatten(grad)


def _contiguous(b: Batch):
    X = np.ascontiguousarray(b.X, dtype=np.float64)
    sex = np.ascontiguousarray(b.sex, dtype=np.float64)
    ca = np.ascontiguousarray(b.ca, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty batch")
    if ca.shape != (X.shape[0],):
        raise ValueError("need one label per chunk")
    return X, sex, ca


def _loss_grad_flat(params: ModelParams, X, sex, ca, grad) -> float:
    return kernels.loss_grad(
        params.flat, params.dims, params.fusion_index, X, sex, ca,
        params.target_shift, params.target_scale, params.logvar_shift, grad,
    )


def nll_gradients(params: ModelParams, batch) -> list[np.ndarray]:
    return loss_and_gradients(params, batch)[1]


# -- optimisation -------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over one contiguous parameter buffer."""

    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, p: np.ndarray, g: np.ndarray) -> None:
        self.t += 1
        kernels.adam_update(p, g, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, self.t)


def train(dataset, config: TrainConfig) -> ModelParams:
    """Fit a fresh model with minibatch Adam. Deterministic given ``config.seed``.

    Per-epoch mean training loss ends up in ``params.loss_history``.
    """
    X, sex, ca = _contiguous(as_batch(dataset))
    n, d = X.shape
    rng = np.random.default_rng(config.seed)
    params = init_params(d, config, rng)
    if config.normalize_targets:
        scale = float(np.std(ca))
        if not scale > 0:
            scale = 1.0
        params.target_shift = float(np.mean(ca))
        params.target_scale = scale
        params.logvar_shift = 2.0 * math.log(scale)

    # "head_bias" trains only the final two entries of the buffer
    lo = params.flat.size - 2 if config.trainable == "head_bias" else 0
    p_view = params.flat[lo:]
    grad = np.empty_like(params.flat)
    g_view = grad[lo:]
    opt = Adam(p_view.size, config.learning_rate, config.beta1, config.beta2, config.eps)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = _loss_grad_flat(params, X[idx], sex[idx], ca[idx], grad)
            if not math.isfinite(loss) or not np.all(np.isfinite(g_view)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}", epoch=epoch, batch=bi
                )
            opt.step(p_view, g_view)
            total += loss * len(idx)
        params.loss_history.append(total / n)
    return params


# -- checkpoints --------------------------------------------------------------

def params_to_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [
            {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in zip(params.weights, params.biases)
        ],
        "target_shift": params.target_shift,
        "target_scale": params.target_scale,
        "logvar_shift": params.logvar_shift,
        "train_config": params.train_config.to_dict() if params.train_config else None,
        "loss_history": list(params.loss_history),
    }


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a hetreg checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    weights, biases = [], []
    for layer in doc["layers"]:
        shape = tuple(layer["shape"])
        weights.append(np.array(layer["weights"], dtype=np.float64).reshape(shape))
        biases.append(np.array(layer["bias"], dtype=np.float64))
    cfg = doc.get("train_config")
    return ModelParams(
        weights,
        biases,
        float(doc["target_shift"]),
        float(doc["target_scale"]),
        float(doc["logvar_shift"]),
        TrainConfig(**cfg) if cfg else None,
        [float(v) for v in doc.get("loss_history", [])],
    )


def save_params(params: ModelParams, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips exactly
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)
        fh.write("\n")


def load_params(path: str | Path) -> ModelParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
