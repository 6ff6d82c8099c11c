"""Quadcopter tracking loop with a learned thermal disturbance model.

The vehicle is a per-axis double integrator (gravity on z). A thermal field
adds a random kick ``y_k ~ N(mu(x, y), sigma(x, y)^2)`` to the vertical
velocity every step. A heteroscedastic EpiOut network over the planar
position predicts ``(mu, sigma, eta)``. The predicted mean is cancelled by
feedforward. The predicted variance scales the vertical feedback gain. A
measurement is added to the training data with probability ``eta``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from epiout import nn
from epiout.epi import EpiStream, SamplerConfig

log = logging.getLogger(__name__)

GRAVITY = 9.81
DIVERGENCE_LIMIT = 1e3


class SimulationDiverged(RuntimeError):
    pass


# ------------------------------------------------------------ thermal field

@dataclass(frozen=True)
class Bump:
    center: tuple
    amplitude: float  # m/s added to vz per step at the centre
    radius: float     # m
    sigma: float = 0.0  # extra noise std at the centre


@dataclass
class ThermalField:
    bumps: tuple = ()
    sigma0: float = 0.02
    sigma_min: float = 1e-6

    def __post_init__(self):
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")

    def __call__(self, p):
        return thermal_eval(self, p)


def default_field() -> ThermalField:
    """Three thermals along the default square track centred at the origin."""
    return ThermalField(bumps=(
        Bump((0.05, -0.01), 0.8, 0.03, 0.10),
        Bump((-0.04, 0.05), -0.4, 0.05, 0.05),
        Bump((-0.05, -0.045), 0.5, 0.04, 0.08),
    ), sigma0=0.02)


def thermal_eval(field: ThermalField, p):
    """``(mu, sigma)`` at planar position(s) ``p``."""
    p = np.asarray(p, dtype=np.float64)
    pts = np.atleast_2d(p)[:, :2]
    mu = np.zeros(len(pts))
    sigma = np.full(len(pts), field.sigma0)
    for b in field.bumps:
        d2 = ((pts - np.asarray(b.center)) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2.0 * b.radius**2))
        mu += b.amplitude * w
        sigma += b.sigma * w
    sigma = np.maximum(sigma, field.sigma_min)
    if p.ndim == 1:
        return float(mu[0]), float(sigma[0])
    return mu, sigma


# ---------------------------------------------------------------- dynamics

@dataclass
class SimState:
    pos: np.ndarray
    vel: np.ndarray
    k: int = 0
    disturbance: float = 0.0

    @classmethod
    def at(cls, pos, vel=(0.0, 0.0, 0.0)):
        return cls(np.asarray(pos, dtype=np.float64).copy(),
                   np.asarray(vel, dtype=np.float64).copy())


def sample_disturbance(field: ThermalField | None, p, rng) -> float:
    """One vertical velocity kick; a draw is consumed even without a field."""
    z = rng.standard_normal()
    if field is None:
        return 0.0
    mu, sigma = thermal_eval(field, p[:2])
    return mu + sigma * z


def step_dynamics(state: SimState, u, field: ThermalField | None, rng, dt: float = 0.01) -> SimState:
    """Exact double-integrator step plus the vertical disturbance kick.

    The kick ``y`` acts as a constant vertical acceleration ``y / dt`` held
    over the step, so the z-velocity grows by exactly ``y`` and a feedforward
    of ``-y / dt`` cancels it without residue.
    """
    y = sample_disturbance(field, state.pos, rng)
    a = np.asarray(u, dtype=np.float64) - (0.0, 0.0, GRAVITY - y / dt)
    pos = state.pos + dt * state.vel + 0.5 * dt * dt * a
    vel = state.vel + dt * a
    return SimState(pos, vel, state.k + 1, y)


# ------------------------------------------------------------------ control

def adapt_gains(k_bar: float, beta: float, sigma_hat: float, use_variance: bool = True,
                k_max: float | None = None):
    """Diagonal position gains; only the vertical entry grows with predicted noise.

    ``k_max`` caps the vertical gain so the sampled loop stays stable when
    the model extrapolates a large scale.
    """
    if sigma_hat < 0:
        raise ValueError("predicted scale must be non-negative")
    s = sigma_hat * sigma_hat if use_variance else sigma_hat
    k_zz = k_bar * (1.0 + beta * s)
    if k_max is not None:
        k_zz = min(k_zz, max(k_max, k_bar))
    return np.diag([k_bar, k_bar, k_zz])


def feedback_control(state: SimState, reference, K, mu_hat: float = 0.0, dt: float = 0.01):
    """PD feedback on position/velocity error plus feedforward.

    ``reference`` is ``(pos, vel, acc)``. Velocity gains are ``2 sqrt(K_ii)``
    (critical damping). The feedforward cancels gravity, adds the reference
    acceleration and removes the predicted mean kick ``mu_hat / dt``.
    """
    p_ref, v_ref, a_ref = (np.asarray(r, dtype=np.float64) for r in reference)
    kp = np.diag(K)
    kd = 2.0 * np.sqrt(kp)
    u_ff = a_ref + (0.0, 0.0, GRAVITY - mu_hat / dt)
    return kp * (p_ref - state.pos) + kd * (v_ref - state.vel) + u_ff


def accept_measurement(eta: float, rng) -> bool:
    """Bernoulli(eta) draw; always consumes one uniform variate."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    return bool(rng.random() < eta)


# ---------------------------------------------------------------- reference

@dataclass
class ControllerConfig:
    k_bar: float = 100.0
    beta: float = 2.0
    dt: float = 0.01
    edge: float = 0.1
    laps: int = 3
    steps_per_lap: int = 2000
    seed: int = 0
    epochs: int = 50
    dmodel: bool = True
    gain_uses_variance: bool = True
    k_max: float | None = 2500.0
    # disturbance model
    hidden: tuple = (50, 50)
    lr: float = 1e-3
    gamma: float = 0.25
    delta: int | None = 2
    lambda_epi: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.edge <= 0:
            raise ValueError("dt and edge must be positive")
        if self.k_bar <= 0 or self.beta < 0:
            raise ValueError("need k_bar > 0 and beta >= 0")
        if self.laps < 1 or self.steps_per_lap < 4:
            raise ValueError("need at least one lap of at least 4 steps")

    @property
    def total_steps(self) -> int:
        return self.laps * self.steps_per_lap


def square_reference(k: int, cfg: ControllerConfig):
    """Counter-clockwise square of side ``edge`` centred at the origin, z = 0."""
    h = cfg.edge / 2.0
    corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
    per_side = cfg.steps_per_lap / 4.0
    speed = cfg.edge / (per_side * cfg.dt)
    s = (k % cfg.steps_per_lap) / per_side
    side = min(int(s), 3)
    frac = s - side
    a, b = corners[side], corners[(side + 1) % 4]
    direction = (b - a) / cfg.edge
    pos = a + frac * (b - a)
    vel = speed * direction
    return (np.array([pos[0], pos[1], 0.0]), np.array([vel[0], vel[1], 0.0]), np.zeros(3))


# -------------------------------------------------------- disturbance model

class DisturbanceModel:
    """Online heteroscedastic EpiOut model of the vertical kick over (x, y).

    Positions are mapped to ``(p - offset) / scale`` before they reach the
    network and the epi sampler, so ``gamma`` is in those normalised units.
    """

    def __init__(self, cfg: ControllerConfig, offset=(0.0, 0.0), scale: float | None = None):
        seeds = np.random.SeedSequence([cfg.seed, 7]).spawn(3)
        self.cfg = cfg
        self.offset = np.asarray(offset, dtype=np.float64)
        self.scale = cfg.edge / 2.0 if scale is None else scale
        self.params = nn.init_params(2, cfg.hidden, 1, "heteroscedastic",
                                     seed=np.random.default_rng(seeds[0]))
        self.adam = nn.AdamState.for_params(self.params, lr=cfg.lr)
        self.rng = np.random.default_rng(seeds[1])
        self.stream = EpiStream(SamplerConfig(gamma=cfg.gamma, delta=cfg.delta),
                                rng=np.random.default_rng(seeds[2]))
        self.train_cfg = nn.TrainConfig(epochs=cfg.epochs, batch_size=None, lr=cfg.lr,
                                        lambda_epi=cfg.lambda_epi, mode="heteroscedastic")
        self.x = np.empty((0, 2))
        self.y = np.empty((0, 1))

    @property
    def n_tr(self) -> int:
        return len(self.x)

    def _norm(self, p):
        return (np.asarray(p, dtype=np.float64)[..., :2] - self.offset) / self.scale

    def predict(self, p):
        """``(mu, sigma, eta)`` at one planar position; ``eta = 1`` without data."""
        out = nn.forward(self.params, self._norm(p))
        eta = 1.0 if self.n_tr == 0 else float(out.eta)
        return float(out.mean[0]), float(out.scale[0]), eta

    def predict_grid(self, pts):
        out = nn.forward(self.params, self._norm(pts))
        eta = np.ones(len(pts)) if self.n_tr == 0 else out.eta
        return out.mean[:, 0], out.scale[:, 0], eta

    def add(self, p, y) -> float:
        """Store a measurement, extend the epi set and retrain; returns the last epoch loss."""
        xn = self._norm(p)
        self.x = np.vstack([self.x, xn[None, :]])
        self.y = np.vstack([self.y, [[y]]])
        epi = self.stream.add(xn)
        _, hist = nn.train(self.params, (self.x, self.y), epi.as_training(),
                           self.train_cfg, adam=self.adam, rng=self.rng)
        return hist[-1]


# ------------------------------------------------------------------ episode

@dataclass
class SimLog:
    t: list = field(default_factory=list)
    pos: list = field(default_factory=list)
    ref: list = field(default_factory=list)
    u: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    mu_hat: list = field(default_factory=list)
    sigma_hat: list = field(default_factory=list)
    k_zz: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    n_tr: list = field(default_factory=list)
    retrain_loss: list = field(default_factory=list)
    eta_before_after: list = field(default_factory=list)

    def arrays(self):
        return {k: np.asarray(v) for k, v in self.__dict__.items()}

    def z_rmse(self, start: int = 0, stop: int | None = None) -> float:
        pos = np.asarray(self.pos)[start:stop]
        ref = np.asarray(self.ref)[start:stop]
        return float(np.sqrt(np.mean((pos[:, 2] - ref[:, 2]) ** 2)))

    def mean_abs_u(self, start: int = 0, stop: int | None = None) -> float:
        return float(np.mean(np.linalg.norm(np.asarray(self.u)[start:stop], axis=1)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "x_des", "y_des", "z_des", "eta", "accepted",
                        "N_tr", "mu_hat", "sigma_hat", "K_zz", "u_z"])
            for i in range(len(self.t)):
                p, r = self.pos[i], self.ref[i]
                w.writerow([repr(self.t[i]), *(repr(float(v)) for v in p),
                            *(repr(float(v)) for v in r), repr(self.eta[i]),
                            int(self.accepted[i]), self.n_tr[i], repr(self.mu_hat[i]),
                            repr(self.sigma_hat[i]), repr(self.k_zz[i]), repr(float(self.u[i][2]))])


def run_episode(cfg: ControllerConfig, field: ThermalField | None = None,
                model: DisturbanceModel | None = None, learn: bool = True) -> SimLog:
    """Closed-loop run over ``cfg.laps`` laps of the square track.

    Per step: read the state, query the disturbance model, set the gains,
    apply the control, then gate the measurement taken at this step. On
    acceptance the model is updated and retrained before the next step.
    With ``cfg.dmodel`` off the model is never consulted (``mu = sigma = 0``).
    """
    field = default_field() if field is None else field
    dist_rng, gate_rng = (np.random.default_rng(s)
                          for s in np.random.SeedSequence(cfg.seed).spawn(2))
    if cfg.dmodel and model is None:
        model = DisturbanceModel(cfg)
    p0, _, _ = square_reference(0, cfg)
    state = SimState.at(p0)
    out = SimLog()
    for k in range(cfg.total_steps):
        ref = square_reference(k, cfg)
        planar = state.pos[:2].copy()
        if cfg.dmodel:
            mu_hat, sigma_hat, eta = model.predict(planar)
        else:
            mu_hat, sigma_hat, eta = 0.0, 0.0, float("nan")
        K = adapt_gains(cfg.k_bar, cfg.beta, sigma_hat, cfg.gain_uses_variance, cfg.k_max)
        u = feedback_control(state, ref, K, mu_hat, cfg.dt)
        state = step_dynamics(state, u, field, dist_rng, cfg.dt)
        if not (np.all(np.abs(state.pos) < DIVERGENCE_LIMIT)
                and np.all(np.abs(state.vel) < DIVERGENCE_LIMIT)):
            raise SimulationDiverged(f"state left |x| < {DIVERGENCE_LIMIT:g} at step {k}")
        draw = gate_rng.random()
        accepted = bool(cfg.dmodel and learn and draw < eta)
        if accepted:
            loss = model.add(planar, state.disturbance)
            _, _, eta_after = model.predict(planar)
            out.retrain_loss.append(loss)
            out.eta_before_after.append((eta, eta_after))
        out.t.append(round((k + 1) * cfg.dt, 10))
        out.pos.append(state.pos.copy())
        out.ref.append(square_reference(k + 1, cfg)[0])
        out.u.append(u)
        out.eta.append(eta)
        out.mu_hat.append(mu_hat)
        out.sigma_hat.append(sigma_hat)
        out.k_zz.append(float(K[2, 2]))
        out.accepted.append(accepted)
        out.n_tr.append(model.n_tr if cfg.dmodel else 0)
    return out


def dmodel_grid(model: DisturbanceModel | None, field: ThermalField, half_width: float = 0.1,
                n: int = 41):
    """Rows ``(x, y, mu_hat, sigma_hat, eta, mu, sigma)`` on an n x n planar grid."""
    g = np.linspace(-half_width, half_width, n)
    a, b = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([a.ravel(), b.ravel()])
    mu, sigma = thermal_eval(field, pts)
    if model is None:
        zeros = np.zeros(len(pts))
        mh, sh, eta = zeros, zeros, np.ones(len(pts))
    else:
        mh, sh, eta = model.predict_grid(pts)
    return np.column_stack([pts, mh, sh, eta, mu, sigma])


def write_dmodel_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "mu_hat", "sigma_hat", "eta", "mu", "sigma"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
