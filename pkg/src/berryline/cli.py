"""Command-line interface: ``berryline <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import BerrylineError, ConfigError
from .estimators import BranchConfig, PipelineConfig, full_qpe_pipeline
from .hamiltonians import load_config, spec_from_mapping
from .measure import HadamardConfig, hadamard_pipeline, write_shot_log
from .spectral import DEFAULT_GRID, decompose


def _frame(doc: dict, args):
    grid = args.grid or int(doc.get("run", {}).get("grid", DEFAULT_GRID))
    return decompose(spec_from_mapping(doc).build(), grid)


def _run_value(doc, args, key, default=None):
    v = getattr(args, key, None)
    return v if v is not None else doc.get("run", {}).get(key, default)


def _emit(obj: dict, out) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def _branch(doc) -> BranchConfig:
    b = doc.get("branch", {})
    return BranchConfig(float(b.get("c_T1", 4.0)), int(b.get("max_doublings", 6)),
                        float(b.get("agreement", np.pi / 8)))


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    if args.stack:
        doc.setdefault("sweep", {})["stack"] = args.stack
    cfg = harness.sweep_config_from(
        doc, {"seed": args.seed, "grid": args.grid, "tol_prop": args.tol_prop, "outdir": args.outdir}
    )
    res = harness.sweep(cfg)
    _emit({k: v.to_dict() for k, v in res.fits.items()}, None)
    return 0


def cmd_estimate(args) -> int:
    doc = load_config(args.config)
    p = dict(doc.get("pipeline", {}))
    if args.eps is not None:
        p["eps"] = args.eps
    cfg = PipelineConfig(
        eps=float(p.get("eps", 1e-3)), alpha=float(p.get("alpha", 2.0)), order=int(p.get("order", 1)),
        c_T=float(p.get("c_T", 2.0)), mode=str(p.get("mode", "exact")), m_bits=p.get("m_bits"),
        repetitions=p.get("repetitions"), eta=float(p.get("eta", 0.05)),
        seed=int(_run_value(doc, args, "seed", 0)), tol_prop=_run_value(doc, args, "tol_prop"),
        branch=_branch(doc),
    )
    res = full_qpe_pipeline(_frame(doc, args), cfg)
    _emit(res.summary(), args.output)
    return 0


def cmd_hadamard(args) -> int:
    doc = load_config(args.config)
    h = dict(doc.get("hadamard", {}))
    if args.eps is not None:
        h["eps"] = args.eps
    cfg = HadamardConfig(
        eps=float(h.get("eps", 3e-2)), c_T=float(h.get("c_T", 2.0)), c_N=float(h.get("c_N", 6.0)),
        N=h.get("N"), T=h.get("T"), alpha=float(h.get("alpha", 2.0)),
        distribution=harness._dist_from(doc.get("randomization")),
        coarse_shots=int(h.get("coarse_shots", 4096)), seed=int(_run_value(doc, args, "seed", 0)),
        overlaps=str(h.get("overlaps", "sampled")), tol_prop=_run_value(doc, args, "tol_prop"),
        branch=_branch(doc),
    )
    log = [] if args.shot_log else None
    res = hadamard_pipeline(_frame(doc, args), cfg, shot_log=log)
    if log is not None:
        write_shot_log(log, args.shot_log)
    _emit(res.summary(), args.output)
    return 0


def cmd_compare(args) -> int:
    results = [harness.load_result(p) for p in args.sweeps]
    text, table = harness.compare_report(results)
    sys.stdout.write(text)
    if args.outdir:
        out = Path(args.outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.txt").write_text(text)
        (out / "compare.csv").write_text(table)
    return 0


def cmd_plotdata(args) -> int:
    res = harness.load_result(args.input)
    if args.kind == "residual-spectrum":
        frame = decompose(res.config.model.build(), args.grid or res.config.grid)
        lo, hi, n = args.t_range
        spec = harness.richardson_residual_grid(frame, lo, hi, int(n), res.config.alpha,
                                                args.tol_prop or res.config.tol_prop)
        harness.emit_plotdata(res, args.kind, args.output, spectrum=spec)
    else:
        harness.emit_plotdata(res, args.kind, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="berryline", description="Berry-phase estimation experiments")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    ap.add_argument("--tol-prop", dest="tol_prop", type=float, default=None, help="propagator tolerance")
    ap.add_argument("--grid", type=int, default=None, help="spectral grid size")
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("sweep", help="run an estimator stack over a runtime grid")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--outdir", default=None)
    s.add_argument("--stack", choices=harness.STACKS, default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("estimate", help="end-to-end QPE pipeline")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--output", default=None)
    s.add_argument("--eps", type=float, default=None)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("hadamard-run", help="end-to-end Hadamard-test pipeline")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--output", default=None)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--shot-log", default=None, help="write per-shot CSV")
    s.set_defaults(func=cmd_hadamard)

    s = sub.add_parser("compare", help="compare persisted sweeps")
    s.add_argument("sweeps", nargs="*")
    s.add_argument("-o", "--outdir", default=None)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("plotdata", help="emit CSV plot data from a persisted sweep")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-k", "--kind", required=True, choices=("error-vs-T", "bias-vs-T", "residual-spectrum"))
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--t-range", nargs=3, type=float, default=(100.0, 300.0, 801), metavar=("LO", "HI", "N"))
    s.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BerrylineError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
