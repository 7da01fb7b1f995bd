"""GRFM-Net: MLP mapping a window of commanded wrenches to the realised wrench.

Each network sees one channel group (forces or moments) of the last three
commands, oldest first, ``[u_{j-2}; u_{j-1}; u_j]`` (18 inputs), and predicts
the six realised channels.  Hidden layers are ``linear -> layer norm ->
softsign``; inputs and outputs are z-scored with training-set statistics.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FORMAT_TAG = "bipedtune-grfm-net"
FORMAT_VERSION = 1
LN_EPS = 1e-5
WINDOW = 3
GROUPS = ("force", "moment")


class ModelFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def softsign(x):
    return x / (1.0 + np.abs(x))


def softsign_grad(x):
    return 1.0 / (1.0 + np.abs(x)) ** 2


@dataclass
class MlpParams:
    layer_sizes: tuple
    weights: list
    biases: list
    ln_gain: list = field(default_factory=list)
    ln_bias: list = field(default_factory=list)
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: np.ndarray = None
    y_std: np.ndarray = None
    group: str = "force"
    layer_norm: bool = True

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        if self.x_mean is None:
            self.x_mean = np.zeros(n_in)
            self.x_std = np.ones(n_in)
        if self.y_mean is None:
            self.y_mean = np.zeros(n_out)
            self.y_std = np.ones(n_out)
        if self.layer_norm and not self.ln_gain:
            self.ln_gain = [np.ones(s) for s in self.layer_sizes[1:-1]]
            self.ln_bias = [np.zeros(s) for s in self.layer_sizes[1:-1]]
        self.validate()

    def validate(self):
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ModelFormatError("layer count does not match layer_sizes")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ModelFormatError(f"layer {k} has wrong shape {W.shape}")
        if self.layer_norm:
            for k, (g, c) in enumerate(zip(self.ln_gain, self.ln_bias)):
                if g.shape != (sizes[k + 1],) or c.shape != (sizes[k + 1],):
                    raise ModelFormatError(f"layer-norm {k} has wrong shape")
        for name, n in (("x_mean", sizes[0]), ("x_std", sizes[0]),
                        ("y_mean", sizes[-1]), ("y_std", sizes[-1])):
            if getattr(self, name).shape != (n,):
                raise ModelFormatError(f"{name} has wrong shape")
        arrays = self.weights + self.biases + self.ln_gain + self.ln_bias
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ModelFormatError("non-finite network parameters")
        if self.group not in GROUPS:
            raise ModelFormatError(f"unknown channel group {self.group!r}")

    def copy(self) -> "MlpParams":
        def cp(xs):
            return [a.copy() for a in xs]
        return MlpParams(self.layer_sizes, cp(self.weights), cp(self.biases), cp(self.ln_gain),
                         cp(self.ln_bias), self.x_mean.copy(), self.x_std.copy(),
                         self.y_mean.copy(), self.y_std.copy(), self.group, self.layer_norm)


def init_params(layer_sizes, rng, group="force", layer_norm=True) -> MlpParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(layer_sizes), weights, biases, group=group, layer_norm=layer_norm)


def identity_params(group="force", window=WINDOW) -> MlpParams:
    """A single linear layer that returns the newest command exactly."""
    n = 6
    W = np.zeros((n, window * n))
    W[:, (window - 1) * n:] = np.eye(n)
    return MlpParams((window * n, n), [W], [np.zeros(n)], group=group, layer_norm=False)


def _layer_norm(a, gain, bias):
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    s = np.sqrt(var + LN_EPS)
    nhat = (a - mu) / s
    return nhat * gain + bias, nhat, s


def _forward_normalized(params: MlpParams, z):
    """Forward pass in normalised units; returns output and a cache for backprop."""
    h = z
    cache = []
    n_hidden = len(params.weights) - 1
    for k in range(n_hidden):
        a = h @ params.weights[k].T + params.biases[k]
        if params.layer_norm:
            n, nhat, s = _layer_norm(a, params.ln_gain[k], params.ln_bias[k])
        else:
            n, nhat, s = a, None, None
        cache.append((h, nhat, s, n))
        h = softsign(n)
    out = h @ params.weights[-1].T + params.biases[-1]
    cache.append((h, None, None, None))
    return out, cache


def forward(params: MlpParams, u_hist) -> np.ndarray:
    """Realised wrench for one window (18,) or a batch (n, 18)."""
    x = np.asarray(u_hist, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"expected {params.layer_sizes[0]} inputs, got {X.shape[1]}")
    z = (X - params.x_mean) / params.x_std
    out, _ = _forward_normalized(params, z)
    y = params.y_mean + params.y_std * out
    return y[0] if single else y


def input_jacobian(params: MlpParams, u_hist) -> np.ndarray:
    """Exact d forward / d u_hist, shape (n_out, n_in)."""
    x = np.asarray(u_hist, dtype=float)
    if x.shape != (params.layer_sizes[0],):
        raise ValueError(f"expected a single window of {params.layer_sizes[0]} inputs")
    z = (x - params.x_mean) / params.x_std
    J = np.diag(1.0 / params.x_std)
    h = z
    for k in range(len(params.weights) - 1):
        a = params.weights[k] @ h + params.biases[k]
        Ja = params.weights[k] @ J
        if params.layer_norm:
            n, nhat, s = _layer_norm(a, params.ln_gain[k], params.ln_bias[k])
            d = a.size
            Jc = Ja - Ja.mean(axis=0, keepdims=True)
            Jn = (Jc - np.outer(nhat, nhat @ Jc) / d) / s
            Jn = params.ln_gain[k][:, None] * Jn
        else:
            n, Jn = a, Ja
        J = softsign_grad(n)[:, None] * Jn
        h = softsign(n)
    return params.y_std[:, None] * (params.weights[-1] @ J)


def _backward(params: MlpParams, cache, d_out):
    """Gradients of sum(d_out * out) with respect to every parameter."""
    n_hidden = len(params.weights) - 1
    gW = [None] * (n_hidden + 1)
    gb = [None] * (n_hidden + 1)
    gg = [None] * n_hidden
    gc = [None] * n_hidden
    h_last = cache[-1][0]
    gW[-1] = d_out.T @ h_last
    gb[-1] = d_out.sum(axis=0)
    dh = d_out @ params.weights[-1]
    for k in range(n_hidden - 1, -1, -1):
        h_in, nhat, s, n = cache[k]
        dn = dh * softsign_grad(n)
        if params.layer_norm:
            gg[k] = (dn * nhat).sum(axis=0)
            gc[k] = dn.sum(axis=0)
            dnhat = dn * params.ln_gain[k]
            da = (dnhat - dnhat.mean(axis=1, keepdims=True)
                  - nhat * (dnhat * nhat).mean(axis=1, keepdims=True)) / s
        else:
            da = dn
        gW[k] = da.T @ h_in
        gb[k] = da.sum(axis=0)
        dh = da @ params.weights[k]
    if not params.layer_norm:
        gg, gc = [], []
    return gW, gb, gg, gc


def regularized_loss(params: MlpParams, z, t, l2_weight):
    """Mean squared error in normalised units plus ``l2_weight * sum ||W||^2``."""
    out, _ = _forward_normalized(params, z)
    mse = np.mean((out - t) ** 2)
    return mse + l2_weight * sum(float(np.sum(W * W)) for W in params.weights)


def loss_gradients(params: MlpParams, z, t, l2_weight):
    out, cache = _forward_normalized(params, z)
    diff = out - t
    loss = np.mean(diff ** 2) + l2_weight * sum(float(np.sum(W * W)) for W in params.weights)
    d_out = 2.0 * diff / diff.size
    gW, gb, gg, gc = _backward(params, cache, d_out)
    gW = [g + 2.0 * l2_weight * W for g, W in zip(gW, params.weights)]
    return loss, gW, gb, gg, gc


def _flat_params(params):
    return params.weights + params.biases + params.ln_gain + params.ln_bias


def physical_mse(params: MlpParams, X, Y) -> float:
    """Mean over samples of the squared error summed over the output channels."""
    pred = forward(params, X)
    return float(np.mean(np.sum((pred - Y) ** 2, axis=1)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_weight: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    val_fraction: float = 0.1
    seed: int = 0
    ema_decay: float = 0.99

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def _stats(A):
    mean = A.mean(axis=0)
    std = A.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def train(X, Y, layer_sizes=(18, 64, 64, 64, 6), cfg: TrainConfig = TrainConfig(),
          group="force", layer_norm=True):
    """Fit one network with Adam.

    Returns ``(params, history)`` where ``history`` has per-epoch
    ``train_mse`` and ``val_mse`` in physical units; entry 0 is the untrained
    network.  The reported and returned weights are an exponential moving
    average of the Adam iterates (``cfg.ema_decay``, bias-corrected; 0 turns
    averaging off).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, Ytr, Xva, Yva = X[tr_idx], Y[tr_idx], X[val_idx], Y[val_idx]

    params = init_params(layer_sizes, rng, group=group, layer_norm=layer_norm)
    params.x_mean, params.x_std = _stats(Xtr)
    params.y_mean, params.y_std = _stats(Ytr)
    Ztr = (Xtr - params.x_mean) / params.x_std
    Ttr = (Ytr - params.y_mean) / params.y_std

    flat = _flat_params(params)
    m = [np.zeros_like(a) for a in flat]
    v = [np.zeros_like(a) for a in flat]
    avg = params.copy()
    avg_flat = _flat_params(avg)
    ema = [np.zeros_like(a) for a in flat]
    step = 0
    history = {"train_mse": [physical_mse(avg, Xtr, Ytr)],
               "val_mse": [physical_mse(avg, Xva, Yva)]}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(Ztr.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gW, gb, gg, gc = loss_gradients(params, Ztr[idx], Ttr[idx], cfg.l2_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            step += 1
            grads = gW + gb + gg + gc
            b1c = 1.0 - cfg.beta1 ** step
            b2c = 1.0 - cfg.beta2 ** step
            for a, g, mi, vi in zip(flat, grads, m, v):
                mi *= cfg.beta1
                mi += (1.0 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1.0 - cfg.beta2) * g * g
                a -= cfg.learning_rate * (mi / b1c) / (np.sqrt(vi / b2c) + cfg.adam_eps)
            ec = 1.0 - cfg.ema_decay ** step
            for a, e, out in zip(flat, ema, avg_flat):
                e *= cfg.ema_decay
                e += (1.0 - cfg.ema_decay) * a
                out[...] = e / ec
        tr = physical_mse(avg, Xtr, Ytr)
        va = physical_mse(avg, Xva, Yva)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDivergedError(epoch)
        history["train_mse"].append(tr)
        history["val_mse"].append(va)
    history["val_indices"] = val_idx
    return avg, history


def save(params: MlpParams, path):
    meta = {"format": FORMAT_TAG, "version": FORMAT_VERSION, "group": params.group,
            "layer_sizes": list(params.layer_sizes), "activation": "softsign",
            "layer_norm": params.layer_norm, "ln_eps": LN_EPS, "window": WINDOW,
            "input_order": "oldest-first"}
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True)),
              "x_mean": params.x_mean, "x_std": params.x_std,
              "y_mean": params.y_mean, "y_std": params.y_std}
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{k}"] = W
        arrays[f"b{k}"] = b
    for k, (g, c) in enumerate(zip(params.ln_gain, params.ln_bias)):
        arrays[f"ln_gain{k}"] = g
        arrays[f"ln_bias{k}"] = c
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path, expected_group: str | None = None) -> MlpParams:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if "meta" not in arrays:
        raise ModelFormatError("model file has no metadata record")
    meta = json.loads(str(arrays["meta"]))
    if meta.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"not a GRFM-Net file (format={meta.get('format')!r})")
    if meta.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {meta.get('version')}")
    if expected_group is not None and meta["group"] != expected_group:
        raise ModelFormatError(f"expected a {expected_group} network, file holds a "
                               f"{meta['group']} network")
    sizes = meta["layer_sizes"]
    n_layers = len(sizes) - 1
    try:
        weights = [arrays[f"W{k}"] for k in range(n_layers)]
        biases = [arrays[f"b{k}"] for k in range(n_layers)]
        gains = [arrays[f"ln_gain{k}"] for k in range(n_layers - 1)] if meta["layer_norm"] else []
        offs = [arrays[f"ln_bias{k}"] for k in range(n_layers - 1)] if meta["layer_norm"] else []
    except KeyError as exc:
        raise ModelFormatError(f"model file is missing array {exc}") from exc
    return MlpParams(sizes, weights, biases, gains, offs, arrays["x_mean"], arrays["x_std"],
                     arrays["y_mean"], arrays["y_std"], meta["group"], bool(meta["layer_norm"]))


class GRFMNet(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around one GRFM-Net.

    ``X`` rows are 18-dim command windows, ``y`` rows the 6 realised channels.
    """

    def __init__(self, hidden_layer_sizes=(64, 64, 64), layer_norm=True, learning_rate=1e-3,
                 l2_weight=1e-3, epochs=200, batch_size=256, val_fraction=0.1,
                 random_state=0, group="force"):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.layer_norm = layer_norm
        self.learning_rate = learning_rate
        self.l2_weight = l2_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.group = group

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        cfg = TrainConfig(learning_rate=self.learning_rate, l2_weight=self.l2_weight,
                          epochs=self.epochs, batch_size=self.batch_size,
                          val_fraction=self.val_fraction, seed=int(self.random_state))
        sizes = (X.shape[1], *self.hidden_layer_sizes, y.shape[1])
        self.params_, self.history_ = train(X, y, sizes, cfg, group=self.group,
                                            layer_norm=self.layer_norm)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return forward(self.params_, X)

    def input_jacobian(self, x):
        check_is_fitted(self, "params_")
        return input_jacobian(self.params_, x)

    def save(self, path):
        check_is_fitted(self, "params_")
        save(self.params_, path)

    @classmethod
    def from_params(cls, params: MlpParams) -> "GRFMNet":
        est = cls(hidden_layer_sizes=params.layer_sizes[1:-1], layer_norm=params.layer_norm,
                  group=params.group)
        est.params_ = params
        est.n_features_in_ = params.layer_sizes[0]
        return est

    @classmethod
    def load(cls, path, expected_group=None) -> "GRFMNet":
        return cls.from_params(load(path, expected_group))
