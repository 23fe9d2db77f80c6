"""Command-line entry points.

Exit codes: 0 when the run's checks pass, 2 when a check fails, 1 on
usage or input errors. Output goes to ``--out`` (stdout by default) as CSV
or JSON; every JSON document carries ``"format_version": 1``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings

import numpy as np

from . import experiments as ex
from .partition import TensorFiltration
from .regularity import direction_regularity_parameter, regularity_parameter
from .tensor_ortho import OrthoSystem

FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, fmt: str = "csv"):
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (overrides the config)")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--format", choices=["csv", "json"], default=fmt)
    p.add_argument("--config", default=None, help="JSON experiment configuration")


def _orders(text: str, dim: int | None = None) -> tuple[int, ...]:
    try:
        k = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad order list {text!r}") from None
    if dim is not None and len(k) == 1:
        k = k * dim
    if dim is not None and len(k) != dim:
        raise UsageError(f"need {dim} orders, got {len(k)}")
    return k


def _read_filtration(path: str) -> TensorFiltration:
    try:
        with open(path) as fh:
            return TensorFiltration.from_json(fh.read())
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot read filtration {path}: {err}") from None


def _read_config(args, required: bool = True) -> ex.ExperimentConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required")
        return None
    import jsonschema
    try:
        with open(args.config) as fh:
            data = json.load(fh)
        cfg = ex.ExperimentConfig.from_dict(data)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, ValueError) as err:
        raise UsageError(f"invalid config {args.config}: {err}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _emit(args, rows: list[dict], doc: dict | None = None):
    if args.format == "json":
        body = {"format_version": FORMAT_VERSION, **(doc or {}), "rows": rows}
        text = json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n"
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# -- subcommands -------------------------------------------------------------

def cmd_gen_filtration(args) -> int:
    spec = {"kind": args.kind, "dim": args.dim, "steps": args.steps, "levels": args.levels, "ell": args.ell}
    k = _orders(args.k, args.dim)
    tf = ex.make_filtration(spec, k, np.random.default_rng(args.seed or 0))
    text = json.dumps(tf.to_dict(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_build_system(args) -> int:
    tf = _read_filtration(args.filtration)
    k = _orders(args.k, tf.dim)
    system = OrthoSystem(tf, k).build()
    err = float(np.max(np.abs(system.gram() - np.eye(len(system)))))
    if args.out:
        system.dump(args.out)
    rows = [{"n": blk.n, "direction": blk.direction, "size": blk.size} for blk in system.blocks]
    ok = err <= args.tol
    args.out = None  # the summary goes to stdout, --out holds the system
    _emit(args, rows, {"functions": len(system), "orthonormality_error": err, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_project(args) -> int:
    try:
        system = OrthoSystem.load(args.system)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot load system {args.system}: {err}") from None
    target = ex.make_target(args.target, system.filtration.domain)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = system.expand(target, n_quad=12, check=False)
    s = system.synthesize(c)
    grid = [a + (b - a) * (np.arange(args.grid) + 0.5) / args.grid for a, b in system.filtration.domain]
    ref = target.on_grid(grid) if hasattr(target, "on_grid") else ex._sampler(target)(grid)
    err = float(np.max(np.abs(s.on_grid(grid) - ref)))
    rows = []
    for ell, a in enumerate(c):
        n, m = system.locate(ell)
        rows.append({"ell": ell, "n": n, "m": m, "coefficient": float(a)})
    _emit(args, rows, {"target": args.target, "functions": len(system), "sup_error": err})
    return EXIT_OK


def cmd_regularity_report(args) -> int:
    tf = _read_filtration(args.filtration)
    r = _orders(args.r, tf.dim)
    gam, gw = regularity_parameter(tf, list(r))
    beta, bw = direction_regularity_parameter(tf, list(r), args.cap)
    doc = {"format_version": FORMAT_VERSION, "r": list(r), "gamma": gam, "gamma_overall": max(gam),
           "beta": beta,
           "witness": {"gamma": [vars(w) for w in gw],
                       "beta": None if bw is None else {"direction": bw.direction, "B": bw.B,
                                                        "window": bw.window, "chain": bw.chain}}}
    text = json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_weak_type(args) -> int:
    cfg = _read_config(args)
    try:
        res = ex.sign_flip_experiment(cfg)
    except ex.DegenerateInputError as err:
        raise UsageError(str(err)) from None
    _emit(args, res.rows(), {"metadata": res.metadata, "max_ratio": res.max_ratio,
                             "norm": res.norm, "per_sign_max": res.per_sign_max})
    return EXIT_OK if np.isfinite(res.max_ratio) else EXIT_FAIL


def cmd_ae_sweep(args) -> int:
    cfg = _read_config(args)
    system, _ = ex.system_from_config(cfg)
    target = ex.make_target(cfg.coefficients.get("target", "abs"), system.filtration.domain)
    res = ex.ae_convergence_sweep(target, system, grid=args.grid)
    _emit(args, res.rows(), {"target": cfg.coefficients.get("target", "abs")})
    return EXIT_OK


def cmd_cz(args) -> int:
    cfg = _read_config(args)
    rng = np.random.default_rng(cfg.seed)
    tf = ex.make_filtration(cfg.filtration, cfg.k, rng)
    coll = ex.build_collection_C(tf, cfg.k)
    from .bspline import BSplineBasis, TensorSpline
    bases = [BSplineBasis(p, kk) for p, kk in zip(tf.partitions(tf.n_steps), cfg.k)]
    shape = [b.dim for b in bases]
    f = TensorSpline(bases, rng.standard_normal(shape) * np.exp(2 * rng.standard_normal(shape)))
    lam = args.lam
    if lam is None:
        lam = ex.cz_decompose(f, np.inf, coll).norm1 / tf.volume() * args.lam_factor
    cz = ex.cz_decompose(f, lam, coll)
    ceiling = ex.overlap_ceiling(cfg.k)
    rows = [{"j": j, "n": n, "volume": float(np.prod([b - a for a, b in box])),
             "local_ratio": float(r)} for j, (n, box, r) in enumerate(zip(cz.steps, cz.boxes, cz.local_ratios))]
    ok = cz.residual <= 1e-10 and cz.overlap <= ceiling
    _emit(args, rows, {"lambda": lam, "sets": len(cz.E), "overlap": cz.overlap, "overlap_ceiling": ceiling,
                       "residual": cz.residual, "h_sq_ratio": cz.h_sq / (lam * cz.norm1),
                       "trivial": cz.trivial, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_remez(args) -> int:
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    rep = ex.remez_check(args.degree, args.dim, args.trials, args.samples, rng)
    _emit(args, rep.rows())
    return EXIT_OK if rep.violations == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orthospline", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-filtration", help="generate a filtration as JSON")
    _common(p, "json")
    p.add_argument("--kind", choices=["random", "dyadic", "quasi_dyadic", "example"], default="random")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--ell", type=int, default=8)
    p.add_argument("--k", default="2")
    p.set_defaults(func=cmd_gen_filtration)

    p = sub.add_parser("build-system", help="build the orthonormal system; --out receives the system (npz)")
    _common(p)
    p.add_argument("filtration")
    p.add_argument("--k", default="2")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_build_system)

    p = sub.add_parser("project", help="expand a named target in a stored system")
    _common(p)
    p.add_argument("--system", required=True)
    p.add_argument("--target", default="abs")
    p.add_argument("--grid", type=int, default=64)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("regularity-report", help="gamma and beta of a filtration")
    _common(p, "json")
    p.add_argument("filtration")
    p.add_argument("--r", default="2")
    p.add_argument("--cap", type=int, default=12)
    p.set_defaults(func=cmd_regularity_report)

    p = sub.add_parser("weak-type", help="sign-flip weak-type ratios")
    _common(p)
    p.set_defaults(func=cmd_weak_type)

    p = sub.add_parser("ae-sweep", help="pointwise convergence of partial sums")
    _common(p)
    p.add_argument("--grid", type=int, default=101)
    p.set_defaults(func=cmd_ae_sweep)

    p = sub.add_parser("cz", help="Calderon-Zygmund split of a random spline")
    _common(p)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--lam-factor", type=float, default=8.0)
    p.set_defaults(func=cmd_cz)

    p = sub.add_parser("remez", help="Monte-Carlo check of the Remez level-set bound")
    _common(p)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--samples", type=int, default=4096)
    p.set_defaults(func=cmd_remez)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError) as err:
        print(f"orthospline: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
