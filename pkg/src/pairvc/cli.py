"""Command line front end.

Exit codes: 0 on success, 2 when a fit did not converge (results are
still written), 1 on any error with a single line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .fit import FitConfig, fit
from .inference import breakdown_constants, detect_outliers, sandwich_cov
from .io import dataset_to_json, load_dataset, result_to_dict, write_result
from .scales import RhoConfig
from .simplex import SimplexOptions
from .simulate import SimScenario, gen_clean, run_study

log = logging.getLogger("pairvc")

COMPOSITE = ("composite-tau", "composite-s")


def _rho_from_args(args) -> RhoConfig:
    cfg = RhoConfig(c1=args.c1, c2=args.c2, b=args.b)
    return cfg.calibrated() if args.calibrate else cfg


def _fit_config(args) -> FitConfig:
    return FitConfig(rho=_rho_from_args(args), tol=args.tol,
                     max_iter=args.max_iter, seed=args.seed,
                     simplex=SimplexOptions(step=0.2, max_evals=300,
                                            xtol=1e-8, ftol=1e-11))


def _add_rho_flags(sp):
    sp.add_argument("--c1", type=float, default=1.0,
                    help="cutoff of the scale defining score")
    sp.add_argument("--c2", type=float, default=1.64,
                    help="cutoff of the second score (tau only)")
    sp.add_argument("--b", type=float, default=0.5,
                    help="scale target in (0, 1)")
    sp.add_argument("--calibrate", action="store_true",
                    help="recompute c1 so pair scales are consistent "
                         "at the normal model")
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)


def _add_io_flags(sp):
    sp.add_argument("--input", required=True, help="dataset file")
    sp.add_argument("--format", choices=("json", "csv"), default=None,
                    help="input format, guessed from the extension")
    sp.add_argument("--structure", default=None,
                    help="structure shorthand or JSON file, required for csv")
    sp.add_argument("--output", default=None, help="result file, stdout if unset")
    sp.add_argument("--out-format", choices=("json", "csv"), default="json")


def cmd_fit(args) -> int:
    ds, spec = load_dataset(args.input, args.format, args.structure)
    cfg = _fit_config(args)
    res = fit(ds, spec, args.estimator, cfg)
    inference = None
    if args.estimator in COMPOSITE and not args.no_inference:
        inference = sandwich_cov(ds, spec, res, cfg.rho)
    doc = result_to_dict(res, inference)
    if res.eta > 0:
        doc["outliers"] = _outlier_doc(ds, spec, res, args.alpha)
    write_result(doc, args.output, args.out_format)
    return 0 if res.converged else 2


def _outlier_doc(ds, spec, res, alpha):
    report = detect_outliers(ds, spec, res, alpha=alpha)
    return {
        "alpha": report.alpha,
        "thresholds": {key: float(v) for key, v in report.thresholds.items()},
        "counts": report.counts(),
        "flagged": [{"unit": u, "coords": list(c)}
                    for u, c in report.flagged()],
    }


def cmd_diagnose(args) -> int:
    ds, spec = load_dataset(args.input, args.format, args.structure)
    cfg = _fit_config(args)
    res = fit(ds, spec, args.estimator, cfg)
    doc = result_to_dict(res)
    doc["outliers"] = _outlier_doc(ds, spec, res, args.alpha) \
        if res.eta > 0 else None
    if args.breakdown:
        bc = breakdown_constants(ds, b=args.b, budget=args.budget,
                                 seed=args.seed)
        doc["breakdown"] = {
            "h": bc.h, "hstar": bc.hstar, "f": bc.f,
            "bound_ccm": bc.bound_ccm, "bound_icm": bc.bound_icm,
            "exact": bc.exact,
        }
    write_result(doc, args.output, args.out_format)
    return 0 if res.converged else 2


def cmd_simulate(args) -> int:
    scn = SimScenario(
        factors=tuple(int(v) for v in args.factors.split(",")),
        n=args.n, k=args.k,
        beta=tuple(float(v) for v in args.beta.split(",")),
        eps=args.eps, mechanism=args.model, leverage=args.leverage,
        seed=args.seed)
    if args.emit_dataset:
        rng = np.random.default_rng(args.seed)
        ds = gen_clean(scn, rng)
        write_result(dataset_to_json(ds, scn.model_spec()), args.output,
                     "json")
        return 0
    grid = tuple(float(v) for v in args.omega0_grid.split(","))
    estimators = tuple(args.estimators.split(","))
    study = run_study(scn, reps=args.reps, omega_grid=grid,
                      estimators=estimators, cfg=_fit_config(args),
                      refine=args.refine, threads=args.threads)
    doc = {
        "omega_grid": list(study.omega_grid),
        "reps": study.reps,
        "estimators": list(study.estimators),
        "msmd": {e: study.msmd[e].tolist() for e in estimators},
        "mkld": {e: study.mkld[e].tolist() for e in estimators},
        "max": {e: {"msmd": study.max_msmd(e), "mkld": study.max_mkld(e)}
                for e in estimators},
        "share_converged": {e: study.n_converged[e].tolist()
                            for e in estimators},
        "dropped": {e: study.n_dropped[e].tolist() for e in estimators},
    }
    write_result(doc, args.output, args.out_format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pairvc",
        description="Robust pairwise estimation of variance component models")
    sub = ap.add_subparsers(dest="command", required=True)

    fp = sub.add_parser("fit", help="fit one dataset")
    _add_io_flags(fp)
    _add_rho_flags(fp)
    fp.add_argument("--estimator", default="composite-tau",
                    choices=("composite-tau", "composite-s", "classical-s",
                             "gaussian-ml"))
    fp.add_argument("--no-inference", action="store_true",
                    help="skip standard errors")
    fp.add_argument("--alpha", type=float, default=0.99,
                    help="quantile order of the outlier cutoffs")
    fp.set_defaults(func=cmd_fit)

    dp = sub.add_parser("diagnose", help="fit, flag outliers, and report "
                                         "breakdown constants")
    _add_io_flags(dp)
    _add_rho_flags(dp)
    dp.add_argument("--estimator", default="composite-tau",
                    choices=("composite-tau", "composite-s"))
    dp.add_argument("--alpha", type=float, default=0.99,
                    help="quantile order of the outlier cutoffs")
    dp.add_argument("--breakdown", action="store_true",
                    help="also compute design breakdown constants")
    dp.add_argument("--budget", type=int, default=20000,
                    help="per pair subset budget before sampling kicks in")
    dp.set_defaults(func=cmd_diagnose)

    mp = sub.add_parser("simulate", help="run a contamination study")
    mp.add_argument("--n", type=int, default=100)
    mp.add_argument("--k", type=int, default=5)
    mp.add_argument("--factors", default="2,2,3")
    mp.add_argument("--beta", default="0,2,2,2,2,2")
    mp.add_argument("--eps", type=float, default=0.1)
    mp.add_argument("--model", choices=("ccm", "icm"), default="ccm")
    mp.add_argument("--leverage", type=float, default=1.0)
    mp.add_argument("--omega0-grid", default="0,1,2,3,4,5,6,7,8")
    mp.add_argument("--reps", type=int, default=100)
    mp.add_argument("--estimators", default="gaussian-ml,composite-tau")
    mp.add_argument("--refine", action="store_true",
                    help="add half steps around the worst grid point")
    mp.add_argument("--threads", type=int, default=1)
    mp.add_argument("--emit-dataset", action="store_true",
                    help="write one clean dataset instead of running fits")
    mp.add_argument("--output", default=None)
    mp.add_argument("--out-format", choices=("json", "csv"), default="json")
    _add_rho_flags(mp)
    mp.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RVC_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
