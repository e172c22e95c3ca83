"""Feed-forward surrogate: log-moment features -> truncated occupancy distribution.

A plain numpy MLP with ReLU hidden layers and a softmax head, trained with
Adam on the L1-plus-max-error loss. Inputs are standardised during training
and the standardisation is folded into the first layer afterwards, so a saved
model consumes raw features.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (50, 70, 200, 350, 200, 350, 600)
OUTPUT_DIM = 500
MODEL_MAGIC = b"QNNM"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MLPParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} expects {w.shape[0]} inputs, previous layer gives "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_widths(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> "MLPParams":
        return MLPParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def init_params(input_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN, output_dim: int = OUTPUT_DIM,
                seed=0, dtype=np.float32) -> MLPParams:
    """Fan-in scaled uniform weights (He-uniform), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MLPParams(weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: MLPParams, X: np.ndarray) -> list:
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = softmax(z) if i == last else np.maximum(z, 0)
        acts.append(h)
    return acts


def forward(params: MLPParams, x) -> np.ndarray:
    """Occupancy distribution for one feature vector (or a 2-D batch)."""
    x = np.asarray(x, dtype=params.dtype)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"expected {params.input_dim} features, got {x.shape[-1]}")
    single = x.ndim == 1
    out = _forward(params, x[None, :] if single else x)[-1]
    return out[0] if single else out


def infer_batch(params: MLPParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim != 2:
        raise ValueError("infer_batch takes a 2-D array of feature rows")
    return forward(params, X)


def loss(Y, Yhat) -> float:
    """Mean over rows of sum |Y - Yhat| plus mean over rows of max |Y - Yhat|."""
    Y, Yhat = np.asarray(Y), np.asarray(Yhat)
    if Y.shape != Yhat.shape or Y.ndim != 2:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Yhat.shape}")
    d = np.abs(Y - Yhat)
    return float(d.sum(axis=1).mean() + d.max(axis=1).mean())


def loss_grad(Y: np.ndarray, Yhat: np.ndarray) -> np.ndarray:
    """Subgradient of :func:`loss` with respect to ``Yhat``; max ties go to the first index."""
    diff = Yhat - Y
    s = np.sign(diff)
    g = s.copy()
    j = np.argmax(np.abs(diff), axis=1)
    rows = np.arange(Y.shape[0])
    g[rows, j] += s[rows, j]
    return g / Y.shape[0]


def loss_and_grads(params: MLPParams, X: np.ndarray, Y: np.ndarray):
    acts = _forward(params, X)
    Yhat = acts[-1]
    value = loss(Y, Yhat)
    g = loss_grad(Y, Yhat)
    # softmax Jacobian-vector product
    dz = Yhat * (g - (g * Yhat).sum(axis=1, keepdims=True))
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        h = acts[i]
        gw[i] = h.T @ dz
        gb[i] = dz.sum(axis=0)
        if i:
            dz = (dz @ params.weights[i].T) * (h > 0)
    return value, gw, gb


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch: int = 256
    lr: float = 1e-3
    epochs: int = 100
    n_moments: int = 4
    val_fraction: float = 0.1
    seed: int = 0
    patience: int = 10
    hidden: tuple = DEFAULT_HIDDEN
    lr_decay: float = 0.5
    plateau: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    params: MLPParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _standardizer(X: np.ndarray):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-8] = 1.0
    return mu, sd


def _fold_input_scaling(params: MLPParams, mu: np.ndarray, sd: np.ndarray) -> MLPParams:
    w0 = params.weights[0].astype(np.float64)
    b0 = params.biases[0].astype(np.float64)
    w = w0 / sd[:, None]
    b = b0 - (mu / sd) @ w0
    dtype = params.dtype
    return MLPParams([w.astype(dtype)] + [x.copy() for x in params.weights[1:]],
                     [b.astype(dtype)] + [x.copy() for x in params.biases[1:]])


def sae(Y, Yhat) -> float:
    return float(np.abs(np.asarray(Y) - np.asarray(Yhat)).sum(axis=1).mean())


def split_indices(n: int, fraction: float, seed: int):
    """(train, held-out) index arrays from a seeded permutation."""
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(fraction * n))) if fraction > 0 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def train(X, Y, cfg: TrainConfig, X_val=None, Y_val=None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch Adam on the L1+max loss with early stopping on validation SAE.

    The learning rate is multiplied by ``lr_decay`` every ``plateau`` epochs
    without a new best validation SAE; training stops after ``patience``.

    Without explicit validation data a ``cfg.val_fraction`` share of the rows
    is held out. Returns the best-on-validation parameters (float32).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y row counts differ")
    if X_val is None:
        if cfg.val_fraction > 0 and X.shape[0] > 1:
            tr, va = split_indices(X.shape[0], cfg.val_fraction, cfg.seed)
            X, Y, X_val, Y_val = X[tr], Y[tr], X[va], Y[va]
        else:
            X_val, Y_val = X, Y
    X_val = np.asarray(X_val, dtype=np.float64)
    Y_val = np.asarray(Y_val, dtype=np.float64)

    mu, sd = _standardizer(X)
    Xs = ((X - mu) / sd).astype(np.float32)
    Xv = ((X_val - mu) / sd).astype(np.float32)
    Ys = Y.astype(np.float32)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(X.shape[1], cfg.hidden, Y.shape[1], rng)
    m = [np.zeros_like(a) for a in params.weights + params.biases]
    v = [np.zeros_like(a) for a in params.weights + params.biases]
    step = 0
    lr = cfg.lr
    best, best_sae, best_epoch, stale = None, math.inf, -1, 0
    history = []
    t_start = time.perf_counter()
    n = Xs.shape[0]

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            value, gw, gb = loss_and_grads(params, Xs[idx], Ys[idx])
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: lr={lr:g}, "
                    f"batch={cfg.batch}, fan-in uniform init seed={cfg.seed}, "
                    f"max |w|={max(float(np.abs(w).max()) for w in params.weights):.3g}")
            total += value * len(idx)
            seen += len(idx)
            step += 1
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for k, (p, g) in enumerate(zip(params.weights + params.biases, gw + gb)):
                m[k] *= cfg.beta1
                m[k] += (1.0 - cfg.beta1) * g
                v[k] *= cfg.beta2
                v[k] += (1.0 - cfg.beta2) * g * g
                p -= (lr / c1) * m[k] / (np.sqrt(v[k] / c2) + cfg.eps)
        pred = forward(params, Xv)
        val_loss = loss(Y_val, pred)
        val_sae = sae(Y_val, pred)
        rec = {"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss, "val_sae": val_sae, "lr": lr}
        history.append(rec)
        if callback:
            callback(rec)
        log.info("epoch %d train %.5f val %.5f sae %.5f", epoch, rec["train_loss"], val_loss, val_sae)
        if val_sae < best_sae:
            best_sae, best_epoch, stale = val_sae, epoch, 0
            best = MLPParams([w.copy() for w in params.weights], [b.copy() for b in params.biases])
        else:
            stale += 1
            if stale >= cfg.patience:
                break
            # halve the step after `plateau` epochs without improvement
            if cfg.plateau and stale % cfg.plateau == 0:
                lr *= cfg.lr_decay
    if best is None:
        raise ValueError("training ran for zero epochs")
    folded = _fold_input_scaling(best, mu, sd)
    return TrainResult(folded, history, best_epoch, time.perf_counter() - t_start)


# -- persistence ------------------------------------------------------------------

def save_model(params: MLPParams, path) -> None:
    """Binary model: magic, version, input_dim, layer count, widths, float32 LE tensors."""
    widths = params.layer_widths
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HII", MODEL_VERSION, params.input_dim, len(widths)))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> MLPParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, input_dim, n_layers = struct.unpack_from("<HII", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 4 + struct.calcsize("<HII")
    widths = struct.unpack_from(f"<{n_layers}I", data, off)
    off += 4 * n_layers
    weights, biases = [], []
    fan_in = input_dim
    for width in widths:
        w = np.frombuffer(data, "<f4", fan_in * width, off).reshape(fan_in, width)
        off += w.nbytes
        b = np.frombuffer(data, "<f4", width, off)
        off += b.nbytes
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
        fan_in = width
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return MLPParams(weights, biases)


# -- moment-count study -------------------------------------------------------------

def moment_sweep(features_for: Callable[[int], np.ndarray], Y, n_values: Sequence[int], cfg: TrainConfig,
                 test_fraction: float = 0.1) -> dict:
    """Held-out SAE of one model per moment count ``n``.

    ``features_for(n)`` returns the feature matrix built from the first ``n``
    moments of the same underlying instances; every model sees the same
    train/test rows and the same initialisation seed.
    """
    Y = np.asarray(Y)
    train_idx, test_idx = split_indices(Y.shape[0], test_fraction, cfg.seed + 1)
    out = {}
    for n in n_values:
        X = np.asarray(features_for(n))
        res = train(X[train_idx], Y[train_idx], dataclasses.replace(cfg, n_moments=n))
        out[n] = sae(Y[test_idx], infer_batch(res.params, X[test_idx]))
        log.info("moment sweep n=%d: SAE %.5f", n, out[n])
    return out
