"""Command-line interface.

Subcommands: ``calibrate``, ``simulate``, ``distances``, ``run``, ``grid``
and ``report``.  Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .calibration import CalibrationBundle, CalibrationError, ParetoParams, calibrate
from .core import CaseFormatError, CaseValidationError, load_case_json, read_motif_table, read_reads_tsv
from .inference import (PRESETS, ChainConfig, InferenceError, bf_estimate, decide_log10,
                        decision_threshold, run_chain, CaseModel)
from .mixsim import default_calibration, make_synthetic_case
from .rfl import load_distance_cache, precompute_distances, save_distance_cache

log = logging.getLogger("mixdeconv")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Invalid(Exception):
    pass


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise _Invalid(f"{path}: malformed JSON ({exc.msg}, line {exc.lineno})") from None


def _calibration(path) -> CalibrationBundle:
    if path in (None, "default"):
        return default_calibration()
    try:
        return CalibrationBundle.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise _Invalid(f"{path}: not a calibration bundle ({exc})") from None


# --------------------------------------------------------------------------
# subcommands

def cmd_calibrate(args) -> int:
    motifs = read_motif_table(args.motifs) if args.motifs else None
    training = []
    files = []
    for path in map(Path, args.training):
        files.extend(sorted(path.glob("*.tsv")) if path.is_dir() else [path])
    if not files:
        raise _Invalid("no training TSV files found")
    for path in files:
        training.extend(read_reads_tsv(path, motifs).values())
    init = CalibrationBundle.load(args.init) if args.init else ParetoParams(*args.pareto_init)
    bundle = calibrate(training, init, max_rounds=args.max_rounds, tol=args.tol, rule=args.ecdf_rule,
                       weighted=not args.unweighted)
    bundle.provenance["training_files"] = [str(p) for p in files]
    bundle.save(args.out)
    print(f"costs {bundle.costs.as_dict()}")
    print(f"pareto shape={bundle.pareto.shape:.6g} lambda={bundle.pareto.rate_lambda:.6g} "
          f"rho={bundle.pareto.zero_mass_rho:.6g}; {bundle.provenance['iterations']} rounds")
    return EXIT_OK


SIM_KEYS = {"n_loci", "p_mix", "seed", "poi_present", "victim", "depth_mean", "depth_sd",
            "locus_seed", "n_reads", "catalog_threshold", "max_alleles", "calibration"}


def simulate_from_spec(spec: dict, out_dir) -> Path:
    unknown = set(spec) - SIM_KEYS
    if unknown:
        raise _Invalid(f"unknown simulation keys: {sorted(unknown)}")
    if "p_mix" not in spec:
        raise _Invalid("simulation spec needs p_mix")
    cal = _calibration(spec.get("calibration"))
    sc = make_synthetic_case(spec.get("n_loci", 5), spec["p_mix"], spec.get("seed", 0),
                             spec.get("poi_present", True), spec.get("victim", False), cal,
                             spec.get("depth_mean", 2500.0), spec.get("depth_sd", 200.0),
                             spec.get("locus_seed", 0), spec.get("n_reads", 2500))
    sc.config["catalog_threshold"] = spec.get("catalog_threshold", 0.0025)
    sc.config["max_alleles"] = spec.get("max_alleles", 8)
    return sc.write(out_dir)


def cmd_simulate(args) -> int:
    path = simulate_from_spec(_load_json(args.spec), args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_distances(args) -> int:
    case = load_case_json(args.case)
    cal = _calibration(args.calibration)
    precompute_distances(case, cal.costs, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _chain_config(args) -> ChainConfig:
    if args.preset:
        steps, burn, alpha = PRESETS[args.preset]
    else:
        steps, burn, alpha = 1100, 100, None
    steps = args.steps if args.steps is not None else steps
    burn = args.burnin if args.burnin is not None else burn
    alpha = args.alpha if args.alpha is not None else alpha
    return ChainConfig(steps, burn, args.seed, alpha_p=alpha, union=args.union,
                       init_p=tuple(args.init_p) if args.init_p else None,
                       integrator=args.integrator)


def execute_run(case, cal, config: ChainConfig, distances=None, trace_path=None, extra=None):
    model = CaseModel(case, cal, distances, warm_start=config.warm_start,
                      integrator=config.integrator)
    t0 = time.perf_counter()
    trace = run_chain(case, cal, config, model=model)
    report = bf_estimate(trace, model, warnings=case.warnings)
    report.config.update(extra or {})
    report.config["k"] = case.num_contributors_k
    report.config["seconds"] = time.perf_counter() - t0
    if trace_path:
        trace.write_tsv(trace_path)
    return report


def cmd_run(args) -> int:
    case = load_case_json(args.case)
    if args.k is not None and args.k != case.num_contributors_k:
        case = dataclasses.replace(case, num_contributors_k=args.k)
    if case.poi_profile is None:
        raise _Invalid("case has no POI profile")
    cal = _calibration(args.calibration)
    distances = load_distance_cache(args.distances, case) if args.distances else None
    config = _chain_config(args)
    report = execute_run(case, cal, config, distances, args.trace,
                         {"case": str(args.case), "calibration": str(args.calibration),
                          "preset": args.preset})
    report.save(args.out)
    print(f"log10 BF {report.log10_bf:.4f} (upper bound {report.log10_upper_bound:.4f}); "
          f"acceptance p {report.acceptance_p:.2f}, c {report.acceptance_c:.2f}")
    return EXIT_OK


def _grid_cell(cell: dict) -> dict:
    out = dict(cell)
    try:
        sc = make_synthetic_case(cell["n_loci"], cell["p_mix"], cell["seed"], cell["poi_present"],
                                 cell["victim"], _calibration(cell.get("calibration")))
        case = sc.case(cell["catalog_threshold"], cell["max_alleles"])
        steps, burn, alpha = cell["chain"]
        config = ChainConfig(steps, burn, cell["seed"], alpha_p=alpha)
        report = execute_run(case, _calibration(cell.get("calibration")), config, extra=cell)
        Path(cell["report_path"]).write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
        out.update(log10_bf=report.log10_bf, log10_upper_bound=report.log10_upper_bound,
                   acceptance_p=report.acceptance_p, acceptance_c=report.acceptance_c, error="")
    except Exception as exc:  # recorded per cell, the batch continues
        out.update(log10_bf=math.nan, log10_upper_bound=math.nan, acceptance_p=math.nan,
                   acceptance_c=math.nan, error=f"{type(exc).__name__}: {exc}")
        log.debug("cell failed\n%s", traceback.format_exc())
    return out


def grid_cells(spec: dict, out_dir) -> list[dict]:
    """Expand a grid spec into cells (full factorial)."""
    try:
        props = spec["proportions"]
        seeds = spec["seeds"]
        flags = spec.get("poi_present", [True, False])
    except KeyError as exc:
        raise _Invalid(f"grid spec lacks {exc}") from None
    victim = bool(spec.get("victim", False))
    k = int(spec.get("k", 2))
    if "preset" in spec:
        chain = PRESETS[spec["preset"]]
    else:
        chain = (spec.get("steps", 600), spec.get("burn_in", 100), spec.get("alpha_p"))
    out_dir = Path(out_dir)
    cells = []
    for x in props:
        p_mix = [float(v) for v in x] if isinstance(x, (list, tuple)) else None
        if p_mix is None:
            if k != 2:
                raise _Invalid("scalar proportions need k = 2; give full vectors otherwise")
            p_mix = [float(x), 1.0 - float(x)]
        for seed in seeds:
            for flag in flags:
                name = f"p{'-'.join(f'{v:g}' for v in p_mix)}_s{seed}_{'in' if flag else 'out'}"
                cells.append({"name": name, "p_mix": p_mix, "seed": int(seed), "poi_present": bool(flag),
                              "victim": victim, "n_loci": int(spec.get("n_loci", 5)),
                              "catalog_threshold": float(spec.get("catalog_threshold", 0.0025)),
                              "max_alleles": spec.get("max_alleles", 8), "chain": list(chain),
                              "calibration": spec.get("calibration"),
                              "report_path": str(out_dir / f"{name}.json")})
    return cells


def run_grid(spec: dict, out_dir, threads: int = 1) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(spec, out_dir)
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            rows = list(pool.map(_grid_cell, cells))
    else:
        rows = [_grid_cell(c) for c in cells]
    cols = ["name", "p_mix", "seed", "poi_present", "log10_bf", "log10_upper_bound",
            "acceptance_p", "acceptance_c", "error"]
    with open(out_dir / "summary.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(",".join(f"{v:g}" for v in r[c]) if c == "p_mix" else str(r[c])
                               for c in cols) + "\n")
    (out_dir / "grid.json").write_text(json.dumps(spec, indent=2), encoding="utf-8")
    return rows


def cmd_grid(args) -> int:
    rows = run_grid(_load_json(args.grid), args.out, args.threads)
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} cells, {failed} failed; summary in {Path(args.out) / 'summary.tsv'}")
    return EXIT_OK


def summarize_report(report: dict, losses=((0.0, 1.0), (1.0, 0.0)), prior_m1: float = 0.5) -> str:
    try:
        bf = report["log10_bf"]
        ub = report["log10_upper_bound"]
    except (KeyError, TypeError):
        raise _Invalid("report lacks log10_bf / log10_upper_bound") from None
    bf = -math.inf if bf == "-inf" else float(bf)
    thr = decision_threshold(losses, prior_m1, 1.0 - prior_m1)
    verdict = decide_log10(bf, losses, prior_m1, 1.0 - prior_m1)
    lines = [f"log10 BF: {bf:.4f}", f"log10 upper bound: {float(ub):.4f}",
             f"acceptance p: {report.get('acceptance_p', float('nan')):.3f}",
             f"acceptance c: {report.get('acceptance_c', float('nan')):.3f}",
             f"decision threshold (BF): {thr:g}",
             f"decision: supports {'M_1' if verdict == 'M1' else 'M_2'}"]
    for w in report.get("warnings", []):
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = _load_json(args.report)
    l11, l12, l21, l22 = args.losses
    print(summarize_report(report, ((l11, l12), (l21, l22)), args.prior_m1))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixdeconv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for grid runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit edit costs and the distance density")
    p.add_argument("--training", nargs="+", required=True,
                   help="reads TSV files, or directories of them, from homozygous loci")
    p.add_argument("--motifs")
    p.add_argument("--init", help="start from an existing bundle")
    p.add_argument("--pareto-init", nargs=3, type=float, default=(2.0, 0.5, 0.7),
                   metavar=("SHAPE", "LAMBDA", "RHO"))
    p.add_argument("--ecdf-rule", choices=("attained", "flat"), default="attained")
    p.add_argument("--unweighted", action="store_true", help="plain L1 instead of gap-weighted")
    p.add_argument("--max-rounds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="write a synthetic case with ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("distances", help="precompute the distance cache of a case")
    p.add_argument("--case", required=True)
    p.add_argument("--calibration", default="default")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("run", help="run the sampler and estimate the Bayes factor")
    p.add_argument("--case", required=True)
    p.add_argument("--calibration", default="default")
    p.add_argument("--k", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--steps", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--init-p", type=float, nargs="+")
    p.add_argument("--union", choices=("exact", "disjoint"), default="exact")
    p.add_argument("--integrator", choices=("laplace", "exact"), default="laplace",
                   help="exact integration is only feasible for tiny read totals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distance-cache", "--distances", dest="distances", help="distance cache TSV")
    p.add_argument("--trace", help="write the per-step trace TSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run a factorial experiment grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="summarize a report and apply the decision rule")
    p.add_argument("--report", required=True)
    p.add_argument("--losses", nargs=4, type=float, default=(0.0, 1.0, 1.0, 0.0),
                   metavar=("L11", "L12", "L21", "L22"))
    p.add_argument("--prior-m1", type=float, default=0.5)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (_Invalid, CaseFormatError, CaseValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InferenceError, CalibrationError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
