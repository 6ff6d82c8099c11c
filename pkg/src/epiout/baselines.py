"""Reference uncertainty models: exact GP with an SE-ARD kernel and MC dropout."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from epiout import nn

log = logging.getLogger(__name__)

JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
LOG_BOUNDS = (-14.0, 10.0)


class CholeskyError(np.linalg.LinAlgError):
    pass


def se_ard(x1, x2, lengthscales, signal_var):
    """sigma_f^2 exp(-0.5 sum_d (x1_d - x2_d)^2 / l_d^2)."""
    a = np.asarray(x1, dtype=np.float64) / lengthscales
    b = np.asarray(x2, dtype=np.float64) / lengthscales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _chol(K):
    n = len(K)
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError(f"kernel matrix not positive definite with jitter up to {JITTERS[-1]}")


def _unpack(logp, d):
    return np.exp(logp[:d]), np.exp(logp[d]), np.exp(logp[d + 1])


@dataclass
class GpModel:
    x: np.ndarray
    y: np.ndarray
    log_lengthscales: np.ndarray
    log_signal_var: float
    log_noise_var: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self):
        return float(np.exp(self.log_signal_var))

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var))

    @property
    def log_params(self):
        return np.concatenate([self.log_lengthscales, [self.log_signal_var, self.log_noise_var]])


def gp_condition(x, y, lengthscales, signal_var, noise_var) -> GpModel:
    """Factorise K + noise I for fixed hyperparameters."""
    x = np.asarray(x, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (x.shape[1],)).copy()
    K = se_ard(x, x, ls, signal_var) + noise_var * np.eye(len(x))
    L, jitter = _chol(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    return GpModel(x, y, np.log(ls), float(np.log(signal_var)), float(np.log(noise_var)),
                   L, alpha, jitter)


def gp_nlml(logp, x, y):
    """Negative log marginal likelihood and its gradient w.r.t. log-hyperparameters.

    ``logp = [log l_1..log l_d, log sigma_f^2, log sigma_n^2]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = x.shape
    ls, sf2, sn2 = _unpack(logp, d)
    Kf = se_ard(x, x, ls, sf2)
    L, jitter = _chol(Kf + sn2 * np.eye(n))
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2.0 * np.pi)
    Linv = np.linalg.solve(L, np.eye(n))
    W = Linv.T @ Linv - np.outer(alpha, alpha)  # K^-1 - alpha alpha^T
    grad = np.empty(d + 2)
    for k in range(d):
        diff = x[:, k][:, None] - x[:, k][None, :]
        grad[k] = 0.5 * np.sum(W * Kf * (diff * diff) / ls[k] ** 2)
    grad[d] = 0.5 * np.sum(W * Kf)
    grad[d + 1] = 0.5 * sn2 * np.trace(W)
    return float(nll), grad


def gp_fit(x_tr, y_tr, restarts: int = 3, seed=0, steps: int = 500, lr: float = 0.05,
           cap: int = 5000, init=None) -> GpModel:
    """Maximise the marginal likelihood with Adam on log-hyperparameters.

    The first start uses ``init`` (default: unit lengthscales and variances);
    further starts add standard-normal perturbations. Training sets larger
    than ``cap`` are subsampled.
    """
    x = np.asarray(x_tr, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    y = np.asarray(y_tr, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("GP needs at least one training point")
    rng = np.random.default_rng(seed)
    if len(x) > cap:
        keep = np.sort(rng.choice(len(x), cap, replace=False))
        log.info("GP: subsampling %d -> %d training points", len(x), cap)
        x, y = x[keep], y[keep]
    d = x.shape[1]
    base = np.zeros(d + 2) if init is None else np.asarray(init, dtype=np.float64)
    best = (np.inf, base)
    for r in range(max(restarts, 1)):
        p = base.copy() if r == 0 else base + rng.standard_normal(d + 2)
        p = np.clip(p, *LOG_BOUNDS)
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t in range(1, steps + 1):
            try:
                val, g = gp_nlml(p, x, y)
            except CholeskyError:
                break
            if val < best[0]:
                best = (val, p.copy())
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p = p - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            p = np.clip(p, *LOG_BOUNDS)
        try:
            val, _ = gp_nlml(p, x, y)
            if val < best[0]:
                best = (val, p.copy())
        except CholeskyError:
            pass
    if not np.isfinite(best[0]):
        raise CholeskyError("no start produced a factorisable kernel matrix")
    ls, sf2, sn2 = _unpack(best[1], d)
    return gp_condition(x, y, ls, sf2, sn2)


def gp_predict(model: GpModel, x):
    """Posterior mean and latent variance (clamped at 0)."""
    xq = np.asarray(x, dtype=np.float64)
    xq = xq[:, None] if xq.ndim == 1 and model.x.shape[1] == 1 else np.atleast_2d(xq)
    ks = se_ard(xq, model.x, model.lengthscales, model.signal_var)
    mean = ks @ model.alpha
    v = np.linalg.solve(model.chol, ks.T)
    var = model.signal_var - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


# ----------------------------------------------------------- MC dropout

@dataclass
class DropoutModel:
    params: nn.NetworkParams
    p: float = 0.05
    samples: int = 50

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        if self.samples < 2:
            raise ValueError("need at least 2 dropout samples")


def dropout_fit(x_tr, y_tr, p: float = 0.05, samples: int = 50, hidden=(50, 50),
                epochs: int = 2000, batch_size=32, lr: float = 1e-3, seed=0) -> DropoutModel:
    """Train a relu network with dropout after each hidden layer on squared error."""
    x = np.asarray(x_tr, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    y = np.asarray(y_tr, dtype=np.float64).reshape(len(x), -1)
    params = nn.init_params(x.shape[1], hidden, y.shape[1], "mean_only", seed=seed)
    cfg = nn.TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, lambda_epi=0.0,
                         seed=seed, dropout=p)
    nn.train(params, (x, y), None, cfg)
    return DropoutModel(params, p, samples)


def dropout_predict(model: DropoutModel, x, seed=0):
    """Sample mean and unbiased sample variance over ``samples`` stochastic passes.

    Every pass draws fresh unit masks from its own generator spawned off
    ``seed``. Without dropout every pass is identical, so the variance is
    exactly zero.
    """
    if model.p == 0.0:
        mean = np.asarray(nn.forward(model.params, x).mean)
        return mean, np.zeros_like(mean)
    streams = np.random.SeedSequence(seed).spawn(model.samples)
    outs = []
    for ss in streams:
        drop = (model.p, np.random.default_rng(ss))
        outs.append(np.asarray(nn.forward(model.params, x, dropout=drop).mean))
    stack = np.stack(outs)
    return stack.mean(axis=0), stack.var(axis=0, ddof=1)


def normalize_uncertainty(values, reference=None):
    """Min-max rescale to [0, 1].

    The range comes from ``reference`` when given (e.g. test-set values when
    rescaling training-set values), and the result is clipped to [0, 1].
    """
    v = np.asarray(values, dtype=np.float64)
    ref = v if reference is None else np.asarray(reference, dtype=np.float64)
    if v.size == 0 or ref.size == 0:
        raise ValueError("cannot normalise an empty set of values")
    lo, hi = ref.min(), ref.max()
    if not hi > lo:
        warnings.warn("constant uncertainty values: all mapped to 0", stacklevel=2)
        return np.zeros_like(v)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)
