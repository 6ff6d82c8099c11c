"""Generation and labelling of the epistemic training set.

Candidates are Gaussian draws around every training input. Each candidate
is scored by its distance to the nearest training input. The ``N_tr``
closest candidates (ties included) get label 0 and are snapped onto that
training input; every other candidate gets label 1.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from epiout._kdtree_py import sqdist_rows
from epiout.kdtree import KdTree

log = logging.getLogger(__name__)

METRICS = ("euclidean",)


@dataclass
class SamplerConfig:
    """``gamma`` is the diagonal of the proposal covariance (squared input units).

    ``delta`` candidates are drawn per training input; ``None`` means
    ``2 * d_x + 1``.
    """

    gamma: float | tuple = 1.0
    delta: int | None = None
    seed: int = 0
    metric: str = "euclidean"

    def __post_init__(self):
        if np.any(np.asarray(self.gamma, dtype=np.float64) <= 0):
            raise ValueError("gamma entries must be positive")
        if self.delta is not None and self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unsupported metric {self.metric!r}")

    def delta_for(self, d_x: int) -> int:
        return self.delta if self.delta is not None else 2 * d_x + 1

    def gamma_vector(self, d_x: int) -> np.ndarray:
        g = np.broadcast_to(np.asarray(self.gamma, dtype=np.float64), (d_x,))
        return g.copy()


@dataclass
class EpiSet:
    """Labelled epistemic set.

    ``inputs`` are the labelled (snapped) inputs; ``raw`` keeps the
    candidates as sampled, so the set can be extended incrementally.
    ``nearest`` and ``sqdist`` refer to the training inputs.
    """

    inputs: np.ndarray
    labels: np.ndarray
    source: np.ndarray
    distances: np.ndarray
    raw: np.ndarray
    nearest: np.ndarray
    sqdist: np.ndarray
    threshold: float
    n_tr: int
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def as_training(self):
        return self.inputs, self.labels

    def to_csv(self, path) -> None:
        write_csv(self, path)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return np.ascontiguousarray(x)


def sample_epi_inputs(x_tr, cfg: SamplerConfig, rng: np.random.Generator | None = None,
                      return_source: bool = False):
    """``delta`` draws from N(x_i, diag(gamma)) per training input, grouped by input."""
    x_tr = _as_2d(x_tr)
    if len(x_tr) == 0:
        raise ValueError("cannot sample epi points around an empty training set")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, d = x_tr.shape
    delta = cfg.delta_for(d)
    std = np.sqrt(cfg.gamma_vector(d))
    noise = rng.standard_normal((n, delta, d)) * std
    cand = (x_tr[:, None, :] + noise).reshape(n * delta, d)
    if return_source:
        return cand, np.repeat(np.arange(n), delta)
    return cand


def nearest_training(candidates, x_tr, tree: KdTree | None = None):
    """Index of and squared distance to the closest training input, per candidate."""
    candidates = _as_2d(candidates)
    x_tr = _as_2d(x_tr)
    if len(candidates) == 0 or len(x_tr) == 0:
        raise ValueError("candidates and training inputs must be non-empty")
    if candidates.shape[1] != x_tr.shape[1]:
        raise ValueError("candidate and training dimensions differ")
    tree = KdTree(x_tr) if tree is None else tree
    return tree.query(candidates, squared=True)


def min_distances(candidates, x_tr, tree: KdTree | None = None) -> np.ndarray:
    """Euclidean distance from each candidate to its closest training input."""
    _, d2 = nearest_training(candidates, x_tr, tree)
    return np.sqrt(d2)


def _label(raw, source, nearest, sqdist, x_tr, n_tr) -> EpiSet:
    n_epi = len(raw)
    if n_epi < n_tr:
        raise ValueError(f"need at least N_tr={n_tr} candidates, got {n_epi}")
    thr2 = np.partition(sqdist, n_tr - 1)[n_tr - 1]
    labels = (sqdist > thr2).astype(np.int64)
    inputs = raw.copy()
    zero = labels == 0
    inputs[zero] = x_tr[nearest[zero]]
    n_zero = int(zero.sum())
    if n_zero != n_tr:
        log.debug("distance ties at the threshold: %d zeros for N_tr=%d", n_zero, n_tr)
    return EpiSet(inputs=inputs, labels=labels, source=source, distances=np.sqrt(sqdist),
                  raw=raw, nearest=nearest, sqdist=sqdist, threshold=float(np.sqrt(thr2)),
                  n_tr=n_tr, diagnostics={"n_zero": n_zero, "n_ties_extra": n_zero - n_tr})


def label_epi(candidates, distances, x_tr, nearest=None, source=None) -> EpiSet:
    """Label candidates against the ``N_tr``-th smallest distance.

    Labels follow the given ``distances``; snap targets come from
    ``nearest`` or, when omitted, from a kd-tree query.
    """
    cand = _as_2d(candidates)
    x_tr = _as_2d(x_tr)
    dist = np.asarray(distances, dtype=np.float64)
    if dist.shape != (len(cand),):
        raise ValueError("distances must align with candidates")
    if nearest is None:
        nearest, _ = nearest_training(cand, x_tr)
    sqdist = dist * dist
    if source is None:
        source = np.full(len(cand), -1, dtype=np.intp)
    return _label(cand, np.asarray(source), np.asarray(nearest, dtype=np.intp),
                  sqdist, x_tr, len(x_tr))


def build_epi_set(x_tr, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> EpiSet:
    """Sample, measure and label in one pass."""
    x_tr = _as_2d(x_tr)
    cand, source = sample_epi_inputs(x_tr, cfg, rng, return_source=True)
    nearest, sqdist = nearest_training(cand, x_tr)
    return _label(cand, source, nearest, sqdist, x_tr, len(x_tr))


def label_from_scratch(raw, x_tr, source=None) -> EpiSet:
    """Distances and labels for given raw candidates, recomputed from nothing."""
    raw = _as_2d(raw)
    x_tr = _as_2d(x_tr)
    nearest, sqdist = nearest_training(raw, x_tr)
    if source is None:
        source = np.full(len(raw), -1, dtype=np.intp)
    return _label(raw, np.asarray(source), nearest, sqdist, x_tr, len(x_tr))


def incremental_update(epi: EpiSet | None, new_x, cfg: SamplerConfig, x_tr,
                       rng: np.random.Generator | None = None,
                       tree: KdTree | None = None) -> EpiSet:
    """Extend ``epi`` after ``new_x`` was appended to the training inputs ``x_tr``.

    Only the new training input can lower an old candidate's distance, so old
    candidates are compared against it alone; the fresh candidates are
    measured against all of ``x_tr``. ``tree`` may index a prefix of ``x_tr``
    (the remaining rows are scanned directly). The result equals
    :func:`label_from_scratch` on the union of raw candidates.
    """
    x_tr = _as_2d(x_tr)
    n = len(x_tr)
    new_x = np.asarray(new_x, dtype=np.float64).reshape(-1)
    if not np.array_equal(x_tr[-1], new_x):
        raise ValueError("new_x must already be the last row of x_tr")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    fresh = sample_epi_inputs(new_x[None, :], cfg, rng)
    fresh_src = np.full(len(fresh), n - 1, dtype=np.intp)
    f_near, f_d2 = _nearest_with_tail(fresh, x_tr, tree)
    if epi is None or len(epi.raw) == 0:
        return _label(fresh, fresh_src, f_near, f_d2, x_tr, n)

    old_d2 = epi.sqdist.copy()
    old_near = epi.nearest.copy()
    to_new = sqdist_rows(epi.raw, new_x)
    closer = to_new < old_d2  # strict: equal distance keeps the lower index
    old_d2[closer] = to_new[closer]
    old_near[closer] = n - 1
    return _label(np.concatenate([epi.raw, fresh]), np.concatenate([epi.source, fresh_src]),
                  np.concatenate([old_near, f_near]), np.concatenate([old_d2, f_d2]), x_tr, n)


def _nearest_with_tail(queries, x_tr, tree):
    if tree is None:
        return KdTree(x_tr).query(queries, squared=True)
    idx, d2 = tree.query(queries, squared=True)
    for j in range(tree.n, len(x_tr)):
        dj = sqdist_rows(queries, x_tr[j])
        closer = dj < d2
        idx[closer] = j
        d2[closer] = dj[closer]
    return idx, d2


class EpiStream:
    """Streaming epistemic set for online learning.

    Keeps the kd-tree over the training inputs and rebuilds it only when
    more than ``rebuild_every`` inputs are unindexed.
    """

    def __init__(self, cfg: SamplerConfig, rng: np.random.Generator | None = None,
                 rebuild_every: int = 64):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.rebuild_every = rebuild_every
        self.x_tr = None
        self.epi = None
        self._tree = None

    def add(self, x) -> EpiSet:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        self.x_tr = x.copy() if self.x_tr is None else np.concatenate([self.x_tr, x])
        if self._tree is None or len(self.x_tr) - self._tree.n > self.rebuild_every:
            self._tree = KdTree(self.x_tr)
        self.epi = incremental_update(self.epi, x[0], self.cfg, self.x_tr, self.rng, self._tree)
        return self.epi


def write_csv(epi: EpiSet, path) -> None:
    d = epi.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + ["label", "distance"])
        for row, lab, dist in zip(epi.inputs, epi.labels, epi.distances):
            w.writerow([repr(float(v)) for v in row] + [int(lab), repr(float(dist))])

