"""Dense feedforward network with mean / aleatoric-scale / epistemic heads.

The last layer is linear with ``n_out + 1`` units in ``mean_only`` mode
(mean, eta logit) and ``2 * n_out + 1`` units in ``heteroscedastic`` mode
(mean, scale pre-activation, eta logit). Hidden layers use relu. Gradients
are computed by hand (reverse mode), and training uses Adam.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MODES = ("mean_only", "heteroscedastic")
ACTIVATIONS = ("relu", "identity", "sigmoid", "softplus")
SCALE_FLOOR = 1e-4
BCE_EPS = 1e-7
FORMAT_TAG = "epiout-net-v1"


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.logaddexp(0.0, z)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softplus":
        return softplus(z)
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(z)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "softplus":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class NetworkParams:
    """Weights ``W[i]`` (in x out) and biases ``b[i]`` plus the head layout."""

    weights: list
    biases: list
    activations: list
    mode: str = "mean_only"
    n_out: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_out < 1:
            raise ValueError("need at least one regression output")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("chained layers have mismatched dimensions")
        if self.weights[-1].shape[1] != self.head_width:
            raise ValueError(f"output layer must have {self.head_width} units")

    @property
    def head_width(self) -> int:
        return self.n_out + 1 if self.mode == "mean_only" else 2 * self.n_out + 1

    @property
    def d_p(self) -> int:
        return self.head_width - 1

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layers(self):
        return [LayerSpec(W.shape[0], W.shape[1], act)
                for W, act in zip(self.weights, self.activations)]

    def copy(self) -> "NetworkParams":
        return NetworkParams([W.copy() for W in self.weights],
                             [b.copy() for b in self.biases],
                             list(self.activations), self.mode, self.n_out)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b
                               in zip(self.weights, self.biases)])

    def with_flat(self, vec) -> "NetworkParams":
        out = self.copy()
        pos = 0
        for i, (W, b) in enumerate(zip(out.weights, out.biases)):
            out.weights[i] = np.asarray(vec[pos:pos + W.size], dtype=np.float64).reshape(W.shape)
            pos += W.size
            out.biases[i] = np.asarray(vec[pos:pos + b.size], dtype=np.float64).copy()
            pos += b.size
        return out


@dataclass
class HeadOutputs:
    mean: np.ndarray
    scale: np.ndarray | None
    eta: np.ndarray


def init_params(input_dim: int, hidden=(50, 50), n_out: int = 1,
                mode: str = "mean_only", seed=0) -> NetworkParams:
    """Glorot-uniform weights, zero biases, relu hidden layers."""
    rng = np.random.default_rng(seed)
    head = n_out + 1 if mode == "mean_only" else 2 * n_out + 1
    sizes = [input_dim, *hidden, head]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        LayerSpec(fan_in, fan_out)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    activations = ["relu"] * len(hidden) + ["identity"]
    return NetworkParams(weights, biases, activations, mode, n_out)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 0 or (x.ndim == 1 and (params.input_dim > 1 or x.shape[0] == 1))
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        # 1-D input to a scalar-input network is a batch unless it has one entry
        x = x[None, :] if single else x[:, None]
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} != network input {params.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    return x, single


def _forward_raw(params, X, dropout=None):
    """Raw last-layer outputs plus the cache needed for backprop."""
    p, rng = dropout if dropout is not None else (0.0, None)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    zs, acts, masks = [], [X], []
    a = X
    last = len(params.weights) - 1
    for i, (W, b, name) in enumerate(zip(params.weights, params.biases, params.activations)):
        z = a @ W + b
        a = _activate(name, z)
        mask = None
        if i < last and p > 0.0:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        zs.append(z)
        masks.append(mask)
        acts.append(a)
    return a, (zs, acts, masks)


def _split_heads(params, raw):
    k = params.n_out
    mean = raw[:, :k]
    scale = softplus(raw[:, k:2 * k]) + SCALE_FLOOR if params.mode == "heteroscedastic" else None
    eta = sigmoid(raw[:, -1])
    return mean, scale, eta


def forward(params: NetworkParams, x, dropout=None) -> HeadOutputs:
    """Evaluate the three heads.

    ``x`` may be one input vector or an (n, d) batch; a single vector gives
    1-element outputs. ``dropout`` is an optional ``(probability, rng)`` pair
    applied after every hidden layer.
    """
    X, single = _as_batch(params, x)
    raw, _ = _forward_raw(params, X, dropout)
    mean, scale, eta = _split_heads(params, raw)
    if single:
        return HeadOutputs(mean[0], None if scale is None else scale[0], eta[0])
    return HeadOutputs(mean, scale, eta)


def _backward(params, cache, d_raw):
    zs, acts, masks = cache
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    delta = d_raw
    for i in range(len(params.weights) - 1, -1, -1):
        if masks[i] is not None:
            delta = delta * masks[i]
        name = params.activations[i]
        if name == "relu":
            delta = delta * (zs[i] > 0.0)
        elif name != "identity":
            delta = delta * _activate_grad(name, zs[i], acts[i + 1] if masks[i] is None
                                           else _activate(name, zs[i]))
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i].T
    return gW, gb


# ---------------------------------------------------------------- losses

def gaussian_nll(mean, scale, y):
    """Per-sample Gaussian negative log likelihood.

    ``scale`` below ``SCALE_FLOOR`` is clamped up to it; the number of
    clamped entries is logged.
    """
    mean, scale, y = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (mean, scale, y)))
    low = scale < SCALE_FLOOR
    if np.any(low):
        log.warning("gaussian_nll: %d scale value(s) clamped to %g", int(low.sum()), SCALE_FLOOR)
        scale = np.where(low, SCALE_FLOOR, scale)
    var = scale * scale
    out = 0.5 * np.log(2.0 * np.pi * var) + (y - mean) ** 2 / (2.0 * var)
    return out if out.ndim else float(out)


def gaussian_nll_grad(mean, scale, y):
    """(d/d mean, d/d scale) of :func:`gaussian_nll`."""
    mean, scale, y = (np.asarray(v, dtype=np.float64) for v in (mean, scale, y))
    scale = np.maximum(scale, SCALE_FLOOR)
    r = y - mean
    return -r / scale**2, 1.0 / scale - r * r / scale**3


def bce(eta, label):
    eta = np.clip(np.asarray(eta, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    label = np.asarray(label, dtype=np.float64)
    out = -label * np.log(eta) - (1.0 - label) * np.log(1.0 - eta)
    return out if out.ndim else float(out)


def bce_logit_grad(logit, label):
    """d bce(sigmoid(logit), label) / d logit."""
    return sigmoid(np.asarray(logit, dtype=np.float64)) - np.asarray(label, dtype=np.float64)


# -------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int | None = 32
    lr: float = 1e-3
    lambda_epi: float = 1.0
    seed: int = 0
    mode: str = "mean_only"
    dropout: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_epi < 0:
            raise ValueError("lambda_epi must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None for full batch")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 1e-3) -> "AdamState":
        zeros = [np.zeros_like(a) for pair in zip(params.weights, params.biases) for a in pair]
        return cls(m=zeros, v=[np.zeros_like(a) for a in zeros], lr=lr)

    def update(self, params: NetworkParams, gW, gb) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        tensors = [t for pair in zip(params.weights, params.biases) for t in pair]
        grads = [g for pair in zip(gW, gb) for g in pair]
        for t, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def loss_and_grad(params: NetworkParams, x, y, x_epi=None, labels=None,
                  lambda_epi: float = 1.0, dropout=None):
    """Total loss = mean regression loss + ``lambda_epi`` * mean BCE, with gradients.

    Regression loss is squared error in ``mean_only`` mode and Gaussian NLL
    in ``heteroscedastic`` mode. Returns ``(loss, (gW, gb), parts)``.
    """
    k = params.n_out
    y = np.asarray(y, dtype=np.float64).reshape(len(x), k)
    use_epi = x_epi is not None and len(x_epi) > 0 and lambda_epi > 0.0
    X = np.concatenate([x, x_epi]) if use_epi else x
    raw, cache = _forward_raw(params, X, dropout)
    n = len(x)
    d_raw = np.zeros_like(raw)
    head = raw[:n]
    if params.mode == "mean_only":
        r = head[:, :k] - y
        reg = float(np.mean(r * r))
        d_raw[:n, :k] = 2.0 * r / r.size
    else:
        mean = head[:, :k]
        scale = softplus(head[:, k:2 * k]) + SCALE_FLOOR
        nll = gaussian_nll(mean, scale, y)
        reg = float(np.mean(nll))
        g_mean, g_scale = gaussian_nll_grad(mean, scale, y)
        d_raw[:n, :k] = g_mean / nll.size
        d_raw[:n, k:2 * k] = g_scale * sigmoid(head[:, k:2 * k]) / nll.size
    epi = 0.0
    if use_epi:
        logits = raw[n:, -1]
        lab = np.asarray(labels, dtype=np.float64)
        epi = float(np.mean(bce(sigmoid(logits), lab)))
        d_raw[n:, -1] = lambda_epi * bce_logit_grad(logits, lab) / len(lab)
    total = reg + lambda_epi * epi
    return total, _backward(params, cache, d_raw), {"regression": reg, "epistemic": epi}


def train(params: NetworkParams, d_tr, d_epi, cfg: TrainConfig, adam: AdamState | None = None,
          rng: np.random.Generator | None = None):
    """Fit ``params`` in place on ``d_tr = (x, y)`` and ``d_epi = (x_epi, labels)``.

    Each epoch walks ``d_tr`` in shuffled mini-batches of ``cfg.batch_size``
    (``None`` = full batch); the epistemic set is split into the same number
    of batches so both sets are seen once per epoch. Returns
    ``(params, history)`` with one total loss per epoch; the loss of an epoch
    is the mean of its batch losses.
    """
    x, y = d_tr
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty training set")
    if cfg.mode != params.mode:
        raise ValueError(f"config mode {cfg.mode!r} != network mode {params.mode!r}")
    x_epi = labels = None
    if d_epi is not None:
        x_epi = np.asarray(d_epi[0], dtype=np.float64)
        if x_epi.ndim == 1:
            x_epi = x_epi[:, None]
        labels = np.asarray(d_epi[1], dtype=np.float64)
        if len(x_epi) == 0:
            warnings.warn("empty epistemic set: BCE term skipped", stacklevel=2)
            x_epi = labels = None
        elif not np.all((labels == 0) | (labels == 1)):
            raise ValueError("epistemic labels must be 0 or 1")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if adam is None:
        adam = AdamState.for_params(params, lr=cfg.lr)
    dropout = (cfg.dropout, rng) if cfg.dropout > 0 else None

    n = len(x)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    n_batches = -(-n // bs)
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        perm_epi = rng.permutation(len(x_epi)) if x_epi is not None else None
        epi_parts = np.array_split(perm_epi, n_batches) if perm_epi is not None else None
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            if epi_parts is not None:
                e_idx = epi_parts[b]
                loss, (gW, gb), _ = loss_and_grad(params, x[idx], y[idx], x_epi[e_idx],
                                                  labels[e_idx], cfg.lambda_epi, dropout)
            else:
                loss, (gW, gb), _ = loss_and_grad(params, x[idx], y[idx], None, None,
                                                  cfg.lambda_epi, dropout)
            adam.update(params, gW, gb)
            total += loss
        history.append(total / n_batches)
    return params, history


# --------------------------------------------------------- serialization

def to_bytes(params: NetworkParams) -> bytes:
    """``<u64 header length><JSON header><little-endian float64 buffer>``."""
    header = {
        "format": FORMAT_TAG,
        "mode": params.mode,
        "n_out": params.n_out,
        "layers": [{"input_dim": s.input_dim, "output_dim": s.output_dim,
                    "activation": s.activation} for s in params.layers],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(params.flat().astype("<f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> NetworkParams:
    (hlen,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"not an {FORMAT_TAG} buffer")
    flat = np.frombuffer(data[8 + hlen:], dtype="<f8").astype(np.float64)
    weights, biases, acts = [], [], []
    for layer in header["layers"]:
        weights.append(np.zeros((layer["input_dim"], layer["output_dim"])))
        biases.append(np.zeros(layer["output_dim"]))
        acts.append(layer["activation"])
    shell = NetworkParams(weights, biases, acts, header["mode"], header["n_out"])
    if flat.size != shell.flat().size:
        raise ValueError("parameter buffer length does not match header")
    return shell.with_flat(flat)


def save(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path) -> NetworkParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
