"""Synthetic evaluation sets and a CSV loader for tabular regression data."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID_1D = 961
GRID_2D = 31


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def d_x(self) -> int:
        return self.x_train.shape[1]

    @property
    def d_p(self) -> int:
        return self.y_train.shape[1]


def sin_pi(x):
    return np.sin(np.pi * np.asarray(x, dtype=np.float64))


def sinc_plus_square(x):
    """sin(5 x1) / (5 x1) + x2**2, continuous at x1 = 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.sinc(5.0 * x[:, 0] / np.pi) + x[:, 1] ** 2


def _grid_1d():
    return np.linspace(-4.0, 4.0, GRID_1D)[:, None]


def _grid_2d():
    g = np.linspace(-2.0, 2.0, GRID_2D)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def _add_noise(y, noise, rng):
    return y if noise <= 0 else y + noise * rng.standard_normal(y.shape)


def gen_1d_center(seed=0, noise: float = 0.0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(100, 1))
    xt = _grid_1d()
    return Dataset("1d_center", x, _add_noise(sin_pi(x), noise, rng), xt, sin_pi(xt))


def gen_1d_split(seed=0, noise: float = 0.0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-2.0, -1.0, size=(100, 1)),
                        rng.uniform(1.0, 2.0, size=(100, 1))])
    xt = _grid_1d()
    return Dataset("1d_split", x, _add_noise(sin_pi(x), noise, rng), xt, sin_pi(xt))


def gen_2d_gaussian(seed=0, noise: float = 0.0) -> Dataset:
    rng = np.random.default_rng(seed)
    std = np.sqrt([0.02, 0.1])
    x = np.concatenate([rng.standard_normal((500, 2)) * std + [-1.0, 0.0],
                        rng.standard_normal((500, 2)) * std + [1.0, 0.0]])
    xt = _grid_2d()
    return Dataset("2d_gaussian", x, _add_noise(sinc_plus_square(x)[:, None], noise, rng),
                   xt, sinc_plus_square(xt)[:, None])


def gen_2d_square(seed=0, noise: float = 0.0) -> Dataset:
    """80 points spaced 0.1 apart (arc length) around the boundary of [-1, 1]^2."""
    t = np.arange(20) * 0.1
    one = np.ones(20)
    x = np.concatenate([
        np.column_stack([-1.0 + t, -one]),
        np.column_stack([one, -1.0 + t]),
        np.column_stack([1.0 - t, one]),
        np.column_stack([-one, 1.0 - t]),
    ])
    rng = np.random.default_rng(seed)
    xt = _grid_2d()
    return Dataset("2d_square", x, _add_noise(sinc_plus_square(x)[:, None], noise, rng),
                   xt, sinc_plus_square(xt)[:, None])


GENERATORS = {
    "1d_center": gen_1d_center,
    "1d_split": gen_1d_split,
    "2d_gaussian": gen_2d_gaussian,
    "2d_square": gen_2d_square,
}


def generate(name: str, seed=0, noise: float = 0.0) -> Dataset:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(seed, noise)


def load_csv(path, input_columns, target_column, n_train: int, n_test: int,
             seed=0, name: str | None = None) -> Dataset:
    """Random disjoint train/test subsample of a headered CSV file.

    Columns are selected by name, so column order in the file is irrelevant.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    input_columns = list(input_columns)
    wanted = input_columns + [target_column]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        missing = [c for c in wanted if c not in header]
        if missing:
            raise KeyError(f"{path}: missing column(s) {missing}")
        cols = [header.index(c) for c in wanted]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: non-numeric or missing cell") from None
    data = np.asarray(rows, dtype=np.float64).reshape(-1, len(wanted))
    if n_train + n_test > len(data):
        raise ValueError(f"requested {n_train}+{n_test} rows but {path} has {len(data)}")
    pick = np.random.default_rng(seed).choice(len(data), size=n_train + n_test, replace=False)
    tr, te = data[pick[:n_train]], data[pick[n_train:]]
    k = len(input_columns)
    return Dataset(name or path.stem, tr[:, :k], tr[:, k:], te[:, :k], te[:, k:])


def write_csv(ds: Dataset, path) -> None:
    """One file holding both splits, tagged by a ``split`` column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + [f"x{i + 1}" for i in range(ds.d_x)]
                   + [f"y{i + 1}" if ds.d_p > 1 else "y" for i in range(ds.d_p)])
        for split, xs, ys in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
            for x, y in zip(xs, ys):
                w.writerow([split] + [repr(float(v)) for v in x] + [repr(float(v)) for v in y])
