"""Command-line entry point: ``coral <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag or
subcommand), 3 unreadable config, 4 config schema violation, 5 missing
checkpoint or dataset file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from . import data as data_mod
from . import metatrain as mt
from . import pipeline as pl

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_UNREADABLE, EXIT_SCHEMA, EXIT_MISSING = 0, 1, 2, 3, 4, 5

log = logging.getLogger("coral")


class CliError(Exception):
    def __init__(self, msg, code=EXIT_RUNTIME):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}", EXIT_USAGE)


def read_config(path, seed=None) -> pl.TaskConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_UNREADABLE) from None
    if seed is not None:
        raw = {**raw, "seed": seed}
    try:
        return pl.config_from_dict(raw)
    except pl.ConfigError as exc:
        raise CliError(f"config {path}: {exc}", EXIT_SCHEMA) from None


def _load(ckpt, need_processor=True) -> pl.Run:
    if not Path(ckpt).is_dir():
        raise CliError(f"missing checkpoint directory {ckpt}", EXIT_MISSING)
    try:
        return pl.load_run(ckpt, need_processor)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_MISSING) from None


def _write_csv(path, rows, header=None):
    header = header or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, restval="")
        w.writeheader()
        w.writerows(rows)


def _task_data(cfg: pl.TaskConfig):
    return {"dynamics": pl.dynamics_data, "ivp": pl.ivp_data, "geometry": pl.geometry_data}[cfg.task](cfg)


def _train_pairs_of(cfg, raw):
    return (pl.ivp_normalized if cfg.task == "ivp" else pl.geometry_normalized)(raw)


# ---------------------------------------------------------------- subcommands


def cmd_generate(args):
    if args.task == "dynamics":
        if args.pde == "heat2d":
            samples = data_mod.gen_heat2d(args.n, args.grid_res, args.frames, args.dt, args.nu, args.k_max,
                                          args.seed)
        else:
            samples = data_mod.gen_advection2d(args.n, args.grid_res, args.frames, args.dt,
                                               tuple(args.velocity), args.k_max, args.seed)
        meta = {"pde": args.pde, "nu": args.nu, "dt": args.dt, "k_max": args.k_max, "seed": args.seed,
                "velocity": list(args.velocity)}
    elif args.task == "ivp":
        samples = data_mod.gen_ivp_heat(args.n, args.grid_res, args.t_out, args.nu, args.k_max, args.seed)
        meta = {"pde": "heat2d", "nu": args.nu, "t_out": args.t_out, "k_max": args.k_max, "seed": args.seed}
    else:
        prior = data_mod.GeometryPrior(args.geo_res, args.n_ctrl, args.amplitude, args.gamma, args.n_boundary)
        samples, _ = data_mod.gen_geometry_task(args.n, prior, args.seed)
        meta = {"pde": "geometry", "seed": args.seed, "gamma": args.gamma, "amplitude": args.amplitude}
    data_mod.write_dataset(args.out, data_mod.make_dataset(args.task, samples, meta))
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_fit_inr(args):
    cfg = read_config(args.config, args.seed)
    raw = _task_data(cfg)
    if cfg.task == "dynamics":
        run = pl.fit_dynamics_inr(cfg, raw)
    else:
        train, _, vs = _train_pairs_of(cfg, raw)
        run = pl.fit_pair_inrs(cfg, train)
        run.values = vs
    pl.save_run(run, args.ckpt)
    for name, tr in run.traces.items():
        if tr:
            mt.write_trace_csv(Path(args.ckpt) / f"{name}_trace.csv", tr)
    print(f"saved INR checkpoint to {args.ckpt}")


def cmd_fit_processor(args):
    run = _load(args.ckpt, need_processor=False)
    if args.config:
        cfg = read_config(args.config, args.seed)
        # architecture and data must stay those of the fitted INR
        cfg.inr, cfg.out_inr, cfg.data, cfg.encoder = run.cfg.inr, run.cfg.out_inr, run.cfg.data, run.cfg.encoder
        run.cfg = cfg
    raw = _task_data(run.cfg)
    if run.cfg.task == "dynamics":
        run = pl.fit_dynamics_processor(run, raw)
    else:
        train, _, _ = _train_pairs_of(run.cfg, raw)
        run = pl.fit_pair_processor(run, train)
    pl.save_run(run, args.ckpt)
    if run.traces.get("processor"):
        mt.write_trace_csv(Path(args.ckpt) / "processor_trace.csv", run.traces["processor"])
    print(f"saved processor to {args.ckpt}")


def evaluate(run: pl.Run, upsample=()):
    raw = _task_data(run.cfg)
    if run.cfg.task == "dynamics":
        reps = pl.dynamics_reports(run, raw)
        if upsample:
            run.extras.update(test=raw[1], idx_te=raw[3])
            reps += pl.run_upsampling_eval(run, upsample)
    elif run.cfg.task == "ivp":
        train, test, _ = pl.ivp_normalized(raw)
        reps = pl.ivp_reports(run, train, test)
    else:
        train, test, _ = pl.geometry_normalized(raw)
        reps = pl.geometry_reports(run, train, test)
    return reps


def cmd_eval(args):
    run = _load(args.ckpt)
    reps = evaluate(run, args.upsample)
    rows = [r.as_row() for r in reps]
    header = list(dict.fromkeys(k for r in rows for k in r))
    out = args.out or Path(args.ckpt) / "eval.csv"
    _write_csv(out, rows, header)
    print(json.dumps(rows, indent=2))


def cmd_forecast(args):
    run = _load(args.ckpt)
    if run.cfg.task != "dynamics":
        raise CliError("forecast needs a dynamics checkpoint")
    if not 1 <= args.horizon <= pl.HORIZON - 1:
        raise CliError(f"--horizon must lie in [1, {pl.HORIZON - 1}]", EXIT_USAGE)
    train, test, idx_tr, idx_te = pl.dynamics_data(run.cfg)
    idx = {"test": idx_te, "train": idx_tr, "full": None}[args.grid]
    rep = pl.evaluate_dynamics(run, test, idx, f"{args.grid} grid", horizon=args.horizon)
    rows = [{"t": t, "mse": float(rep.per_step[t])} for t in range(1, args.horizon + 1)]
    out = args.out or Path(args.ckpt) / "forecast.csv"
    _write_csv(out, rows)
    print(f"wrote {len(rows)} rows to {out}")


def cmd_design(args):
    run = _load(args.ckpt)
    if run.cfg.task != "geometry":
        raise CliError("design needs a geometry checkpoint")
    fam = data_mod.GeometryFamily(data_mod.GeometryPrior(**run.cfg.data.prior))
    if args.init:
        p0 = np.asarray(json.loads(Path(args.init).read_text()), dtype=np.float64)
    else:
        p0 = fam.sample_params(np.random.default_rng(args.seed))
    p, trace = pl.inverse_design(run, p0, args.target, args.steps, args.lr, fam)
    out = args.out or Path(args.ckpt) / "design_trace.csv"
    _write_csv(out, [{"iteration": i, "objective": j} for i, j in enumerate(trace)])
    Path(out).with_suffix(".params.json").write_text(json.dumps(p.tolist()))
    print(f"objective {trace[0]:.6g} -> {trace[-1]:.6g}; trace in {out}")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_dat(path, rows, cols):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for r in rows:
            fh.write(" ".join(str(r[c]) for c in cols) + "\n")


def cmd_report(args):
    ck = Path(args.ckpt)
    if not ck.is_dir():
        raise CliError(f"missing checkpoint directory {ck}", EXIT_MISSING)
    out = Path(args.out_dir or ck / "report")
    out.mkdir(parents=True, exist_ok=True)
    curves = {
        "inr_trace.csv": ("epoch", "loss"),
        "out_inr_trace.csv": ("epoch", "loss"),
        "processor_trace.csv": ("epoch", "loss"),
        "forecast.csv": ("t", "mse"),
        "design_trace.csv": ("iteration", "objective"),
    }
    plots = []
    for name, cols in curves.items():
        if not (ck / name).exists():
            continue
        rows = _read_csv(ck / name)
        dat = out / (Path(name).stem + ".dat")
        _write_dat(dat, rows, cols)
        log_y = "set logscale y\n" if cols[1] in ("loss", "mse") else ""
        plots.append(f"set title '{Path(name).stem}'\nset xlabel '{cols[0]}'\nset ylabel '{cols[1]}'\n"
                     f"{log_y}plot '{dat.name}' using 1:2 with lines notitle\nunset logscale y\n")
    if (ck / "eval.csv").exists():
        (out / "metrics.csv").write_text((ck / "eval.csv").read_text())
    if not plots and not (out / "metrics.csv").exists():
        raise CliError(f"nothing to report in {ck}; run eval or forecast first", EXIT_MISSING)
    gp = out / "curves.gp"
    gp.write_text("set terminal pngcairo size 800,500\n"
                  + "".join(f"set output '{i}.png'\n{p}" for i, p in enumerate(plots)))
    print(f"report written to {out}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="coral", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--task", choices=data_mod.TASK_KINDS, required=True)
    g.add_argument("--pde", choices=("heat2d", "advection2d"), default="heat2d")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=64, help="trajectories or pairs")
    g.add_argument("--grid-res", type=int, default=16)
    g.add_argument("--frames", type=int, default=pl.HORIZON)
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--nu", type=float, default=0.05)
    g.add_argument("--k-max", type=int, default=1)
    g.add_argument("--velocity", type=float, nargs=2, default=(0.5, 0.0))
    g.add_argument("--t-out", type=float, default=0.1)
    g.add_argument("--geo-res", type=int, default=16)
    g.add_argument("--n-ctrl", type=int, default=5)
    g.add_argument("--amplitude", type=float, default=0.15)
    g.add_argument("--gamma", type=float, default=4.0)
    g.add_argument("--n-boundary", type=int, default=4096)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    f = sub.add_parser("fit-inr", help="meta-train the INR(s) of a task")
    f.add_argument("--config", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--seed", type=int)
    f.set_defaults(fn=cmd_fit_inr)

    f = sub.add_parser("fit-processor", help="fit normalization and processor on fixed codes")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--config", help="override processor settings of the stored config")
    f.add_argument("--seed", type=int)
    f.set_defaults(fn=cmd_fit_processor)

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--upsample", type=int, nargs="*", default=(), help="extra query resolutions")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    fc = sub.add_parser("forecast", help="per-timestep MSE of a dynamics rollout")
    fc.add_argument("--ckpt", required=True)
    fc.add_argument("--horizon", type=int, default=pl.HORIZON - 1)
    fc.add_argument("--grid", choices=("test", "train", "full"), default="test")
    fc.add_argument("--out")
    fc.set_defaults(fn=cmd_forecast)

    d = sub.add_parser("design", help="gradient-based shape design on a geometry checkpoint")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--target", type=float, required=True)
    d.add_argument("--steps", type=int, default=50)
    d.add_argument("--lr", type=float, default=1e-2)
    d.add_argument("--init", help="JSON file with initial (2, n_ctrl) parameters")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_design)

    r = sub.add_parser("report", help="CSV tables and gnuplot curve files from a checkpoint directory")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out-dir")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except pl.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, TypeError, ArithmeticError, RuntimeError, container.ContainerError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
