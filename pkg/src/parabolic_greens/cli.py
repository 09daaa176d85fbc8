"""Command-line front end: ``pgreen <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 resource or path error (including
unreadable model files), 4 numerical failure.

Relative ``--out`` paths are placed under ``$PGREEN_OUTPUT_DIR`` when that
variable is set. CSV outputs end with ``#`` provenance comment lines (config
hash, seed, package version, timestamp); model files embed the same fields
except the timestamp, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import NumericalError, PGreenError, ResourceError, UsageError

OUTPUT_DIR_ENV = "PGREEN_OUTPUT_DIR"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            raise NumericalError("NaN value in CSV output")
        return format(v, ".17g")
    return str(v)


def emit_csv(table, path, columns=None, footer=None) -> None:
    """Write rows (list of dicts) as CSV with 17 significant digits.

    ``columns`` fixes the header (required for an empty table). ``footer``
    lines are appended as ``#`` comments. NaN values are rejected before
    anything is written.
    """
    rows = list(table)
    if columns is None:
        if not rows:
            raise UsageError("an empty table needs explicit columns")
        columns = list(rows[0].keys())
    for r in rows:
        if set(r.keys()) != set(columns):
            raise UsageError("table is not rectangular")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    for line in footer or ():
        buf.write(f"# {line}\n")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise ResourceError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list:
    """Rows of a CSV written by :func:`emit_csv` (comment lines skipped)."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise ResourceError(f"cannot read {path}: {exc}") from exc
    return list(csv.DictReader(lines))


def resolve_out(path: str) -> str:
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    return path


def check_writable(path: str) -> str:
    """Fail fast before any solve when ``path`` cannot be written."""
    path = resolve_out(path)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ResourceError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK) or (os.path.exists(path) and not os.access(path, os.W_OK)):
        raise ResourceError(f"output path {path} is not writable")
    return path


def _args_config(a) -> dict:
    """Parsed flags that determine the result; output paths and thread count
    are left out so reruns elsewhere hash the same."""
    return {k: v for k, v in vars(a).items() if k not in ("func", "out", "threads")}


def _provenance(config: dict, seed) -> dict:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return {"config_sha256": hashlib.sha256(blob).hexdigest(), "seed": seed,
            "version": __version__}


def _footer(config: dict, seed) -> list:
    prov = _provenance(config, seed)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return [f"config_sha256={prov['config_sha256']} seed={seed} version={__version__}",
            f"created={stamp}"]


def _write_json(obj, path, config, seed):
    obj = dict(obj)
    obj["provenance"] = dict(_provenance(config, seed),
                             created=_dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise ResourceError(f"cannot write {path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

CONFIG_SCHEMA = {
    "solver": {"dim": 1, "nx": 64, "nt": 256, "T": 1.0, "coefficient": {"kind": "heat"},
               "substeps": 1},
    "kernel": {"kind": "squared_exponential", "length_scale": 0.2, "beta": 1.0,
               "variance": 1.0, "k_max": 200},
    "partition": {"levels": 3, "rho": 1.0, "beta": 1.0},
    # t, s and trials only feed the bound experiment; learn ignores them
    "rsvd": {"k": None, "p": None, "tol": 1e-6, "rank_cap": 32, "t": math.e, "s": 3.0,
             "trials": 50},
    "seed": 0,
}


def load_config(path: str) -> dict:
    """Strict JSON config: unknown sections or keys are rejected; missing keys default."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ResourceError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return merge_config(raw)


def merge_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - set(CONFIG_SCHEMA)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    cfg = json.loads(json.dumps(CONFIG_SCHEMA))
    for sec, val in raw.items():
        if sec == "seed":
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise UsageError("seed must be a non-negative integer")
            cfg["seed"] = val
            continue
        if not isinstance(val, dict):
            raise UsageError(f"config section {sec!r} must be an object")
        bad = set(val) - set(CONFIG_SCHEMA[sec])
        if bad:
            raise UsageError(f"unknown keys in section {sec!r}: {sorted(bad)}")
        cfg[sec].update(val)
    return cfg


def build_from_config(cfg: dict, threads=None):
    from .sampling import CovarianceKernel
    from .solver import Grid, ParabolicSolver, coefficient_from_dict

    s = cfg["solver"]
    grid = Grid(int(s["dim"]), int(s["nx"]), int(s["nt"]), float(s["T"]))
    coeff = coefficient_from_dict(s["coefficient"], grid.n)
    coeff.check_bounds(grid)
    solver = ParabolicSolver(coeff, grid, substeps=int(s["substeps"]))
    k = cfg["kernel"]
    kernel = CovarianceKernel(k["kind"], length_scale=float(k["length_scale"]),
                              beta=float(k["beta"]), variance=float(k["variance"]))
    return solver, kernel


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_partition(a):
    from .geometry import CAUSAL_ZERO, build_partition, count_partition

    cfg = _args_config(a)
    out = check_writable(a.out) if a.out else None
    if out is None:
        tree = count_partition(a.dim, a.levels)
        adm, non = int(tree.adm_per_level.sum()), int(tree.n_nonadm)
        print(f"admissible={adm} non-admissible={non}")
        return 0
    tree = build_partition(a.dim, a.levels, rho=a.rho, beta=a.beta, leaf_cap=a.leaf_cap)
    adm = int(tree.adm_per_level.sum())
    print(f"admissible={adm} non-admissible={tree.n_nonadm} "
          f"causal-zero={int(np.sum(tree.status == CAUSAL_ZERO))}")
    leaves = [{"level": int(tree.level[i]), "indices_x": tree.ix[i].tolist(),
               "indices_y": tree.iy[i].tolist(), "status": tree.leaf_status_name(i)}
              for i in range(len(tree))]
    _write_json({"dim": a.dim, "levels": a.levels, "rho": a.rho, "beta": a.beta,
                 "admissible": adm, "non_admissible": int(tree.n_nonadm), "leaves": leaves},
                out, cfg, None)
    return 0


def cmd_ground_truth(a):
    from .solver import (Grid, greens_discrete_ground_truth, heat_coefficient, load_coefficient,
                         save_kernel_table)

    out = check_writable(a.out)
    grid = Grid(a.dim, a.nx, a.nt, a.T)
    coeff = heat_coefficient(a.dim) if a.coeff == "heat" else load_coefficient(a.coeff, a.dim)
    table = greens_discrete_ground_truth(coeff, grid, max_bytes=int(a.max_mb * 2 ** 20),
                                         substeps="auto" if a.substeps is None else a.substeps)
    save_kernel_table(table, out)
    print(f"wrote {out} (substeps={table.substeps})")
    return 0


def cmd_theory(a):
    from .theory import TheoryParams, report

    params = TheoryParams(n=a.n, lam=a.lam, Lam=a.Lam, beta=a.beta, rho=a.rho, theta=a.theta,
                          delta0=a.delta0, C_diag=a.c_diag)
    rep = report(params, a.epsilon)
    for key, val in rep.items():
        print(f"{key} = {val:.6g}" if isinstance(val, float) else f"{key} = {val}")
    if a.out:
        _write_json({"constants": rep}, check_writable(a.out), _args_config(a), None)
    return 0


def cmd_learn(a):
    from .learner import learn_greens, serialize

    out = check_writable(a.out)
    cfg = load_config(a.config)
    solver, kernel = build_from_config(cfg)
    r = cfg["rsvd"]
    part = cfg["partition"]
    model = learn_greens(solver, kernel, int(part["levels"]), k=r["k"], p=r["p"],
                         seed=cfg["seed"], tol=float(r["tol"]), rank_cap=int(r["rank_cap"]),
                         rho=float(part["rho"]), beta=float(part["beta"]),
                         k_max=int(cfg["kernel"]["k_max"]), threads=a.threads)
    model.metadata["provenance"] = _provenance(cfg, cfg["seed"])
    serialize(model, out)
    print(f"learned {len(model.blocks)} blocks with {model.pairs_total} solves -> {out}")
    return 0


def cmd_eval(a):
    from .learner import deserialize, evaluate

    out = check_writable(a.out)
    model = deserialize(a.model)
    rows = read_csv(a.points)
    n = model.n
    xk = ["x"] if n == 1 else [f"x{i + 1}" for i in range(n)]
    yk = ["y"] if n == 1 else [f"y{i + 1}" for i in range(n)]
    try:
        x = np.array([[float(r[c]) for c in xk] for r in rows]).reshape(-1, n)
        y = np.array([[float(r[c]) for c in yk] for r in rows]).reshape(-1, n)
        t = np.array([float(r["t"]) for r in rows])
        s = np.array([float(r["s"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"points file needs columns {xk + ['t'] + yk + ['s']}: {exc}") from exc
    g = evaluate(model, x, t, y, s) if rows else np.zeros(0)
    table = []
    for j in range(len(rows)):
        row = {c: x[j, i] for i, c in enumerate(xk)}
        row["t"] = t[j]
        row.update({c: y[j, i] for i, c in enumerate(yk)})
        row["s"] = s[j]
        row["G"] = g[j]
        table.append(row)
    emit_csv(table, out, columns=xk + ["t"] + yk + ["s", "G"],
             footer=_footer({"model": model.metadata}, model.metadata.get("seed")))
    return 0


def cmd_error(a):
    from .learner import deserialize, l1_error
    from .solver import HeatSeriesOracle, load_kernel_table

    out = check_writable(a.out)
    model = deserialize(a.model)
    if a.oracle == "heat":
        if model.metadata.get("coefficient", {}).get("name") != "heat":
            raise UsageError("the heat oracle needs a model of the heat equation")
        oracle = HeatSeriesOracle(model.n, model.grid.T)
    else:
        oracle = load_kernel_table(a.oracle)
    rep = l1_error(model, oracle, a.points_per_axis)
    print(f"relative L1 error = {rep.relative:.6g} (non-admissible part {rep.non_admissible:.6g}); "
          f"pairs_total = {model.pairs_total}")
    _write_json(dict(rep.to_dict(), pairs_total=model.pairs_total), out,
                {"model": model.metadata, "oracle": a.oracle}, model.metadata.get("seed"))
    return 0


def cmd_svd_decay(a):
    from .experiments import DECAY_TOLS, svd_decay

    out = check_writable(a.out)
    res = svd_decay(tuple(a.levels), a.per_level, a.nodes, DECAY_TOLS)
    for L, (coef, r2) in res.fits.items():
        print(f"level {L}: rank at 1e-6 = {res.max_rank[L][1e-6]}, polynomial R^2 = {r2:.4f}")
    emit_csv(res.rows, out, columns=["level", "leaf", "tol", "rank"],
             footer=_footer(_args_config(a), None))
    return 0


def cmd_diagonal_mass(a):
    from .experiments import diagonal_mass_curve

    out = check_writable(a.out)
    r = np.logspace(math.log10(a.r_min), math.log10(a.r_max), a.num)
    curve = diagonal_mass_curve(a.p, r)
    print(f"slope = {curve.slope:.4f} (predicted {curve.predicted:.4f})")
    emit_csv(curve.rows, out, columns=["r_t", "mass", "relative", "slope", "predicted"],
             footer=_footer(_args_config(a), None))
    return 0


def cmd_rsvd_bound(a):
    from .experiments import heat_setup, rsvd_bound
    from .sampling import CovarianceKernel

    out = check_writable(a.out)
    solver = heat_setup(a.dim, a.nx, a.nt)
    rep, rows, leaf = rsvd_bound(solver, CovarianceKernel(length_scale=a.length_scale),
                                 a.block_level, a.k, a.p, a.trials, a.seed)
    print(f"leaf {leaf}: exceedance {rep.exceed_fraction:.4f} (allowed {rep.allowed_fraction():.4f}), "
          f"bound {rep.bound:.4g}, floor {rep.floor:.4g}, gamma_k {rep.gamma:.4g}")
    emit_csv(rows, out, columns=["trial", "rel_error", "bound", "floor", "exceeded"],
             footer=_footer(_args_config(a), a.seed))
    return 0


def cmd_learning_rate(a):
    from .experiments import heat_setup
    from .learner import learning_curve
    from .sampling import CovarianceKernel

    out = check_writable(a.out)
    solver = heat_setup(a.dim, a.nx, a.nt)
    curve = learning_curve(a.targets, solver, CovarianceKernel(length_scale=a.length_scale),
                           seeds=a.seeds, C_diag=a.c_diag, points_per_axis=a.points_per_axis,
                           threads=a.threads)
    print(f"slope of pairs vs 1/error = {curve.slope:.4f}")
    rows = curve.rows()
    if math.isnan(curve.slope):
        # one budget point has no slope; leave the cell empty rather than NaN
        for r in rows:
            r["slope"] = ""
    emit_csv(rows, out, columns=["target", "seed", "n_levels", "error", "pairs", "slope"],
             footer=_footer(_args_config(a), list(a.seeds)))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pgreen", description="Learn Green's functions of parabolic PDEs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("partition", help="build the hierarchical partition")
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--levels", type=int, required=True)
    sp.add_argument("--rho", type=float, default=1.0)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--leaf-cap", type=int, default=1_000_000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("ground-truth", help="tabulate the discrete kernel")
    sp.add_argument("--coeff", default="heat", help="'heat' or a JSON coefficient file")
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--nx", type=int, required=True)
    sp.add_argument("--nt", type=int, required=True)
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--substeps", type=int)
    sp.add_argument("--max-mb", type=float, default=1024.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ground_truth)

    sp = sub.add_parser("theory", help="print the closed-form constants")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--Lambda", dest="Lam", type=float, default=1.0)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--theta", type=float, default=0.5)
    sp.add_argument("--rho", type=float, default=1.0)
    sp.add_argument("--delta0", type=float, default=0.5)
    sp.add_argument("--epsilon", type=float, default=1e-3)
    sp.add_argument("--c-diag", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("learn", help="learn a model from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    threads(sp)
    sp.set_defaults(func=cmd_learn)

    sp = sub.add_parser("eval", help="evaluate a model at points")
    sp.add_argument("--model", required=True)
    sp.add_argument("--points", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("error", help="relative L1 error of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--oracle", default="heat", help="'heat' or a kernel table file")
    sp.add_argument("--points-per-axis", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_error)

    exp = sub.add_parser("exp", help="experiment recipes")
    esub = exp.add_subparsers(dest="experiment", required=True, parser_class=_Parser)

    sp = esub.add_parser("svd-decay")
    sp.add_argument("--levels", type=int, nargs="+", default=[2, 3, 4])
    sp.add_argument("--per-level", type=int, default=4)
    sp.add_argument("--nodes", type=int, default=12)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_svd_decay)

    sp = esub.add_parser("diagonal-mass")
    sp.add_argument("--p", type=int, default=1)
    sp.add_argument("--r-min", type=float, default=1e-3)
    sp.add_argument("--r-max", type=float, default=1e-1)
    sp.add_argument("--num", type=int, default=9)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_diagonal_mass)

    sp = esub.add_parser("rsvd-bound")
    sp.add_argument("--block-level", type=int, default=2)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--p", type=int, default=10)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--nx", type=int, default=64)
    sp.add_argument("--nt", type=int, default=256)
    sp.add_argument("--length-scale", type=float, default=0.2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_rsvd_bound)

    sp = esub.add_parser("learning-rate")
    sp.add_argument("--targets", type=float, nargs="+", required=True)
    sp.add_argument("--c-diag", type=float, help="near-diagonal mass constant (fitted if omitted)")
    sp.add_argument("--points-per-axis", type=int, default=4)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--nx", type=int, default=64)
    sp.add_argument("--nt", type=int, default=256)
    sp.add_argument("--length-scale", type=float, default=0.2)
    sp.add_argument("--out", required=True)
    threads(sp)
    sp.set_defaults(func=cmd_learning_rate)
    return p


def run(argv=None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except PGreenError as exc:
        kind = getattr(exc, "code", type(exc).__name__)
        print(f"pgreen: error ({kind}): {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except MemoryError as exc:
        print(f"pgreen: error (resource): out of memory: {exc}", file=sys.stderr)
        return ResourceError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
