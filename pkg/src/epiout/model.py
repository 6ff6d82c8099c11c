"""EpiOut regressor: one network predicting the target and an epistemic score."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from epiout import nn
from epiout.epi import EpiSet, SamplerConfig, build_epi_set


@dataclass
class EpiOutModel:
    params: nn.NetworkParams
    epi: EpiSet
    history: list = field(default_factory=list)

    def predict(self, x):
        """``(mean, eta)`` for a batch of inputs."""
        out = nn.forward(self.params, _as_2d(x))
        return out.mean, out.eta

    def predict_one(self, x):
        out = nn.forward(self.params, x)
        return out.mean, out.eta


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def fit_epiout(x_tr, y_tr, sampler: SamplerConfig | None = None,
               train_cfg: nn.TrainConfig | None = None, hidden=(50, 50)) -> EpiOutModel:
    """Build the epistemic set from ``x_tr`` and train the shared network on both sets."""
    x = _as_2d(x_tr)
    y = np.asarray(y_tr, dtype=np.float64).reshape(len(x), -1)
    sampler = sampler or SamplerConfig()
    train_cfg = train_cfg or nn.TrainConfig()
    epi = build_epi_set(x, sampler)
    params = nn.init_params(x.shape[1], hidden, y.shape[1], train_cfg.mode, seed=train_cfg.seed)
    _, hist = nn.train(params, (x, y), epi.as_training(), train_cfg)
    return EpiOutModel(params, epi, hist)
