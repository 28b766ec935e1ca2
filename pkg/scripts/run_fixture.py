"""Train one calibrated fixture end to end and write its checkpoint and reports.

    python3 scripts/run_fixture.py dynamics out/dyn
    python3 scripts/run_fixture.py geometry out/geo --design-target 0.5
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from coral import metatrain as mt
from coral import pipeline as pl
from coral.data import GeometryFamily, GeometryPrior
from coral.fixtures import fixture_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("name", choices=("dynamics", "geometry"))
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--upsample", type=int, nargs="*", default=[32, 64])
    ap.add_argument("--design-target", type=float)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    cfg = fixture_config(args.name, seed=args.seed)

    def progress(row):
        if row["epoch"] % 25 == 0:
            logging.info("epoch %d loss %.3e", row["epoch"], row["loss"])

    t0 = time.time()
    run = (pl.run_dynamics if args.name == "dynamics" else pl.run_geometry)(cfg, progress)
    pl.save_run(run, out)
    for name, tr in run.traces.items():
        mt.write_trace_csv(out / f"{name}_trace.csv", tr)
    reps = list(run.reports)
    if args.name == "dynamics":
        if args.upsample:
            reps += pl.run_upsampling_eval(run, args.upsample)
        with open(out / "forecast.csv", "w") as fh:
            fh.write("t,mse\n" + "".join(f"{t},{v!r}\n" for t, v in enumerate(run.reports[0].per_step) if t))
    if args.name == "geometry" and args.design_target is not None:
        fam = GeometryFamily(GeometryPrior(**cfg.data.prior))
        p, trace = pl.inverse_design(run, fam.sample_params(np.random.default_rng(args.seed)),
                                     args.design_target, fam=fam)
        with open(out / "design_trace.csv", "w") as fh:
            fh.write("iteration,objective\n" + "".join(f"{i},{j!r}\n" for i, j in enumerate(trace)))
    summary = {"seconds": time.time() - t0, "reports": [r.as_row() for r in reps]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
