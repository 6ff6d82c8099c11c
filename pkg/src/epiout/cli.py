"""Command-line runs: benchmark grid, closed-loop simulation, dataset export.

Every run writes ``config_resolved.ini`` next to its outputs; feeding that
file back through ``--config`` reproduces the CSV outputs byte for byte.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from epiout import baselines, control, datasets, metrics, nn
from epiout.epi import SamplerConfig
from epiout.model import fit_epiout

log = logging.getLogger("epiout")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODELS = ("gp", "dropout", "epiout")

DEFAULTS = {
    "bench": {
        "seed": "0",
        "seeds": "1",
        "datasets": "1d_center,1d_split,2d_gaussian,2d_square",
        "models": "gp,dropout,epiout",
        "noise": "0.0",
        "hidden": "50,50",
        "epochs": "2000",
        "batch_size": "32",
        "lr": "0.001",
        "lambda_epi": "1.0",
        "gamma": "1.0",
        "delta": "auto",
        "dropout_p": "0.05",
        "dropout_samples": "50",
        "gp_restarts": "3",
        "gp_steps": "500",
        "gp_cap": "5000",
        "timings": "no",
    },
    "simulate": {
        "seed": "0",
        "beta": "2.0",
        "dmodel": "on",
        "k_bar": "100.0",
        "laps": "3",
        "steps_per_lap": "2000",
        "epochs": "50",
        "lr": "0.001",
        "gamma": "0.25",
        "delta": "2",
        "hidden": "50,50",
        "ablations": "no",
        "grid": "41",
    },
    "gen-data": {
        "seed": "0",
        "datasets": "1d_center,1d_split,2d_gaussian,2d_square",
        "noise": "0.0",
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with a section per command")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", type=Path, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="epiout", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    b = sub.add_parser("bench", parents=[common], help="train and score models on datasets")
    b.add_argument("--datasets")
    b.add_argument("--models")
    s = sub.add_parser("simulate", parents=[common], help="closed-loop quadcopter run")
    s.add_argument("--beta", type=float)
    s.add_argument("--dmodel", choices=("on", "off"))
    g = sub.add_parser("gen-data", parents=[common], help="write synthetic datasets as CSV")
    g.add_argument("--datasets")
    return p


def resolve_config(args) -> configparser.ConfigParser:
    """Defaults, then the ``--config`` file, then command-line flags."""
    cfg = configparser.ConfigParser()
    cfg.read_dict({args.command: DEFAULTS[args.command]})
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        extra = configparser.ConfigParser()
        extra.read(args.config)
        if extra.has_section(args.command):
            for key, value in extra[args.command].items():
                if key not in DEFAULTS[args.command]:
                    raise UsageError(f"unknown key {key!r} in [{args.command}]")
                cfg[args.command][key] = value
    sec = cfg[args.command]
    for flag in ("seed", "datasets", "models", "beta", "dmodel"):
        value = getattr(args, flag, None)
        if value is not None:
            sec[flag] = str(value)
    return cfg


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text, allowed, what):
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in allowed]
    if bad or not names:
        raise UsageError(f"unknown {what} {bad or text!r}; choose from {sorted(allowed)}")
    return names


def _delta(text):
    return None if text.strip() == "auto" else int(text)


def _threads() -> int:
    raw = os.environ.get("EPIOUT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EPIOUT_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


# ------------------------------------------------------------------ bench

def run_cell(model_name: str, ds_name: str, seed: int, opts: dict):
    """Train one model on one dataset; returns ``(EvalRecord, test mean, test eta)``."""
    ds = datasets.generate(ds_name, seed=seed, noise=opts["noise"])
    if model_name == "epiout":
        sampler = SamplerConfig(gamma=opts["gamma"], delta=opts["delta"], seed=seed)
        tcfg = nn.TrainConfig(epochs=opts["epochs"], batch_size=opts["batch_size"],
                              lr=opts["lr"], lambda_epi=opts["lambda_epi"], seed=seed)
        fitted, t_train = metrics.timed(lambda: fit_epiout(ds.x_train, ds.y_train, sampler,
                                                           tcfg, opts["hidden"]))
        (mean, eta), t_pred = metrics.timed(lambda: fitted.predict(ds.x_test))
        _, eta_tr = fitted.predict(ds.x_train)
    elif model_name == "dropout":
        fitted, t_train = metrics.timed(lambda: baselines.dropout_fit(
            ds.x_train, ds.y_train, p=opts["dropout_p"], samples=opts["dropout_samples"],
            hidden=opts["hidden"], epochs=opts["epochs"], batch_size=opts["batch_size"],
            lr=opts["lr"], seed=seed))
        (mean, var), t_pred = metrics.timed(lambda: baselines.dropout_predict(fitted, ds.x_test, seed))
        _, var_tr = baselines.dropout_predict(fitted, ds.x_train, seed)
        eta = baselines.normalize_uncertainty(var[:, 0])
        eta_tr = baselines.normalize_uncertainty(var_tr[:, 0], reference=var[:, 0])
    elif model_name == "gp":
        fitted, t_train = metrics.timed(lambda: baselines.gp_fit(
            ds.x_train, ds.y_train, restarts=opts["gp_restarts"], seed=seed,
            steps=opts["gp_steps"], cap=opts["gp_cap"]))
        (mean, var), t_pred = metrics.timed(lambda: baselines.gp_predict(fitted, ds.x_test))
        _, var_tr = baselines.gp_predict(fitted, ds.x_train)
        eta = baselines.normalize_uncertainty(var)
        eta_tr = baselines.normalize_uncertainty(var_tr, reference=var)
    else:
        raise UsageError(f"unknown model {model_name!r}")
    mean = np.asarray(mean).reshape(len(ds.x_test), -1)[:, 0]
    try:
        rho = metrics.weighted_mse(mean, ds.y_test[:, 0], eta)
    except metrics.UndefinedMetricError:
        log.warning("%s on %s (seed %d): weighted MSE undefined", model_name, ds_name, seed)
        rho = float("nan")
    rec = metrics.EvalRecord(model_name, ds_name, seed, rho, metrics.mse(mean, ds.y_test[:, 0]),
                             metrics.total_discount(eta), metrics.total_discount(eta_tr),
                             t_train, t_pred)
    return rec, ds.x_test, mean, np.asarray(eta, dtype=np.float64)


def _bench_options(sec) -> dict:
    bs = sec["batch_size"].strip()
    return {
        "noise": sec.getfloat("noise"),
        "hidden": _ints(sec["hidden"]),
        "epochs": sec.getint("epochs"),
        "batch_size": None if bs in ("full", "none") else int(bs),
        "lr": sec.getfloat("lr"),
        "lambda_epi": sec.getfloat("lambda_epi"),
        "gamma": sec.getfloat("gamma"),
        "delta": _delta(sec["delta"]),
        "dropout_p": sec.getfloat("dropout_p"),
        "dropout_samples": sec.getint("dropout_samples"),
        "gp_restarts": sec.getint("gp_restarts"),
        "gp_steps": sec.getint("gp_steps"),
        "gp_cap": sec.getint("gp_cap"),
    }


def cmd_bench(sec, out: Path) -> int:
    names = _names(sec["datasets"], datasets.GENERATORS, "dataset")
    models = _names(sec["models"], MODELS, "model")
    opts = _bench_options(sec)
    base = sec.getint("seed")
    seeds = [base + i for i in range(sec.getint("seeds"))]
    cells = [(m, d, s) for d in names for m in models for s in seeds]
    threads = min(_threads(), len(cells))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, *zip(*cells), [opts] * len(cells)))
    else:
        results = [run_cell(m, d, s, opts) for m, d, s in cells]

    records = []
    for d in names:
        for m in models:
            rows = [r for r in results if r[0].model == m and r[0].dataset == d]
            path = out / f"{d}_{m}.csv"
            _write_point_csv(path, rows)
            records.extend(r[0] for r in rows)
            for r in rows:
                log.info("%-8s %-12s seed %d  rho %.4g  mse %.4g", m, d, r[0].seed,
                         r[0].rho, r[0].mse)
    metrics.write_records(records, out / "summary.csv", metrics.SUMMARY_FIELDS)
    if sec.getboolean("timings"):
        metrics.write_records(records, out / "timings.csv", metrics.TIMING_FIELDS)
    if all(np.isnan(r.rho) for r in records):
        log.error("weighted MSE undefined for every cell")
        return EXIT_RUNTIME
    return EXIT_OK


def _write_point_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d_x = rows[0][1].shape[1]
        w.writerow(["seed"] + [f"x{i + 1}" for i in range(d_x)] + ["prediction", "eta"])
        for rec, x, mean, eta in rows:
            for xi, p, e in zip(x, mean, eta):
                w.writerow([rec.seed, *(repr(float(v)) for v in xi), repr(float(p)), repr(float(e))])


# --------------------------------------------------------------- simulate

def _controller(sec, **override) -> control.ControllerConfig:
    kw = dict(
        seed=sec.getint("seed"),
        beta=sec.getfloat("beta"),
        dmodel=sec["dmodel"] == "on",
        k_bar=sec.getfloat("k_bar"),
        laps=sec.getint("laps"),
        steps_per_lap=sec.getint("steps_per_lap"),
        epochs=sec.getint("epochs"),
        lr=sec.getfloat("lr"),
        gamma=sec.getfloat("gamma"),
        delta=_delta(sec["delta"]),
        hidden=_ints(sec["hidden"]),
    )
    kw.update(override)
    return control.ControllerConfig(**kw)


def _episode(cfg):
    model = control.DisturbanceModel(cfg) if cfg.dmodel else None
    return control.run_episode(cfg, model=model), model


def cmd_simulate(sec, out: Path) -> int:
    if sec["dmodel"] not in ("on", "off"):
        raise UsageError("dmodel must be 'on' or 'off'")
    cfg = _controller(sec)
    field = control.default_field()
    runs = {"": cfg}
    if sec.getboolean("ablations"):
        runs["_dmodel_off"] = _controller(sec, dmodel=False)
        runs["_beta0"] = _controller(sec, beta=0.0)
    summary = []
    for suffix, c in runs.items():
        simlog, model = _episode(c)
        simlog.write_csv(out / f"simulation{suffix}.csv")
        if suffix == "":
            control.write_dmodel_csv(control.dmodel_grid(model, field, n=sec.getint("grid")),
                                     out / "dmodel.csv")
        L = c.steps_per_lap
        n_tr = simlog.n_tr
        summary.append([suffix.lstrip("_") or "main", repr(c.beta), "on" if c.dmodel else "off",
                        repr(simlog.z_rmse(L if c.laps > 1 else 0)),
                        repr(simlog.mean_abs_u(L if c.laps > 1 else 0)),
                        *(n_tr[min((i + 1) * L, len(n_tr)) - 1] for i in range(c.laps))])
        log.info("simulation%s: z-RMSE %s", suffix, summary[-1][3])
    with open(out / "simulation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "beta", "dmodel", "z_rmse_after_lap1", "mean_abs_u_after_lap1"]
                   + [f"n_tr_lap{i + 1}" for i in range(cfg.laps)])
        w.writerows(summary)
    return EXIT_OK


# --------------------------------------------------------------- gen-data

def cmd_gen_data(sec, out: Path) -> int:
    names = _names(sec["datasets"], datasets.GENERATORS, "dataset")
    for name in names:
        ds = datasets.generate(name, seed=sec.getint("seed"), noise=sec.getfloat("noise"))
        datasets.write_csv(ds, out / f"{name}.csv")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "simulate": cmd_simulate, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out_dir or Path("results")
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "config_resolved.ini", "w") as fh:
                cfg.write(fh)
        except OSError as exc:
            log.error("cannot write to %s: %s", out, exc)
            return EXIT_RUNTIME
        return COMMANDS[args.command](cfg[args.command], out)
    except (UsageError, configparser.Error) as exc:
        print(f"epiout: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"epiout: bad value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except control.SimulationDiverged as exc:
        print(f"epiout: simulation diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"epiout: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
