"""Benchmark harness: gamma and mesh sweeps over solver configurations.

``bench run --config cfg.toml --out dir`` writes ``results.csv`` and
``results.json``; ``bench diff --ref a.csv --got b.csv --tol rel=0.2``
compares two tables cell by cell. Reference tables live in
``metric_amg/reference``.
"""

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

from .amg import HierarchyOptions, build_hierarchy, cycle
from .assembly import ProblemSpec, build_system, load_config, membrane_gamma
from .krylov import IndefiniteError, pcg

EXPERIMENTS = {
    "bidomain2d": ("bidomain", 2),
    "bidomain3d": ("bidomain", 3),
    "emi2d": ("emi", 2),
    "emi3d": ("emi", 3),
    "reduced_emi": ("reduced_emi", 3),
}
HEADER = ["experiment", "n", "dofs", "gamma", "solver", "iters", "cond", "setup_s", "solve_s"]
DEFAULT_SWEEP = [1.0, 1e2, 1e4, 1e6, 1e8, 1e10]
EXIT_NONCONVERGED = 2


@dataclass
class BenchmarkConfig:
    """One experiment grid.

    ``sweep`` holds the coupling values; with ``sweep_kind="dt_inv"`` they are
    inverse time steps turned into ``gamma`` by :func:`membrane_gamma`.
    ``variants`` are tagged problem overrides (e.g. radius and coupling of
    the reduced model); each solver entry is a tagged set of
    :class:`HierarchyOptions` fields.
    """

    experiment: str
    levels: list
    sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    sweep_kind: str = "gamma"
    solvers: list = field(default_factory=lambda: [{"tag": "amg_schwarz"}])
    variants: list = field(default_factory=list)
    problem: dict = field(default_factory=dict)
    criterion: str = "rel_precond_residual"
    tol: float = 1e-10
    max_iter: int = 300
    out: str = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if not self.levels or not self.sweep or not self.solvers:
            raise ValueError("levels, sweep and solvers must be nonempty")
        if self.sweep_kind not in ("gamma", "dt_inv"):
            raise ValueError("sweep_kind is 'gamma' or 'dt_inv'")
        tags = [s.get("tag") for s in self.solvers]
        if None in tags or len(set(tags)) != len(tags):
            raise ValueError("every solver needs a unique tag")
        for s in self.solvers:
            HierarchyOptions.from_dict(s)
        self.levels = [int(n) for n in self.levels]
        self.sweep = [float(g) for g in self.sweep]

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_config(path))

    def grid(self):
        """Independent grid points ``(n, variant, solver)``; each runs the whole sweep."""
        variants = self.variants or [{"tag": None}]
        return [(n, v, s) for n in self.levels for v in variants for s in self.solvers]


@dataclass
class ResultRow:
    experiment: str
    n: int
    dofs: int
    gamma: float
    solver: str
    iters: int
    cond: float
    setup_s: float
    solve_s: float
    converged: bool = True

    def as_csv(self):
        return [self.experiment, self.n, self.dofs, repr(self.gamma), self.solver, self.iters,
                f"{self.cond:.6g}", f"{self.setup_s:.4f}", f"{self.solve_s:.4f}"]


def _problem(cfg, n, variant):
    model, dim = EXPERIMENTS[cfg.experiment]
    data = {"model": model, "dim": dim, "n": n, **cfg.problem}
    data.update({k: v for k, v in variant.items() if k != "tag"})
    return ProblemSpec.from_dict(data)


def run_point(cfg, n, variant, solver):
    """Run the sweep of one grid point; returns its rows in sweep order."""
    base = build_system(_problem(cfg, n, variant))
    opts = HierarchyOptions.from_dict(solver)
    tag = solver["tag"] if variant.get("tag") is None else f"{variant['tag']}/{solver['tag']}"
    rows, prev = [], None
    for value in cfg.sweep:
        gamma = membrane_gamma(value) if cfg.sweep_kind == "dt_inv" else value
        system = base.with_gamma(gamma)
        t0 = time.perf_counter()
        hier = build_hierarchy(system, opts, reuse=prev)
        setup = time.perf_counter() - t0
        prev = hier
        try:
            _, rep = pcg(system.A, system.rhs(), lambda r: cycle(hier, r), tol=cfg.tol,
                         max_iter=cfg.max_iter, criterion=cfg.criterion)
            iters, cond, ok, wall = rep.iterations, rep.cond_estimate, rep.converged, rep.wall_time
        except IndefiniteError as exc:
            iters, cond, ok, wall = exc.iteration, float("nan"), False, float("nan")
        rows.append(ResultRow(cfg.experiment, n, system.n, value, tag, iters, cond, setup, wall, ok))
    return rows


def _run_point_args(args):
    return run_point(*args)


def run_benchmark(cfg):
    """All rows of the grid, in canonical (solver, n, gamma) order."""
    points = [(cfg, n, v, s) for n, v, s in cfg.grid()]
    if cfg.workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_point_args, points))
    else:
        chunks = [run_point(*p) for p in points]
    rows = [r for chunk in chunks for r in chunk]
    order = {s: i for i, s in enumerate(dict.fromkeys(r.solver for r in rows))}
    rows.sort(key=lambda r: (order[r.solver], r.n, r.gamma))
    return rows


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=10)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_results(rows, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in rows:
            w.writerow(r.as_csv())
    meta = {
        "config": dataclasses.asdict(cfg),
        "git_hash": _git_hash(),
        "seed": cfg.seed,
        "rhs": "ones on the coupled-side block, zeros elsewhere, Dirichlet lifted",
        "initial_guess": "zero",
        "cond_estimator": "Lanczos tridiagonal from CG coefficients",
        "hierarchy_defaults": dataclasses.asdict(HierarchyOptions()),
        "problem_defaults": dataclasses.asdict(ProblemSpec()),
        "rows": [dataclasses.asdict(r) for r in rows],
    }
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump(meta, fh, indent=1, default=float)


def summarize(rows):
    """Plain-text iteration table, one block per solver."""
    lines = []
    for solver in dict.fromkeys(r.solver for r in rows):
        sub = [r for r in rows if r.solver == solver]
        sweep = list(dict.fromkeys(r.gamma for r in sub))
        lines.append(f"[{sub[0].experiment}] {solver}")
        lines.append("dofs".rjust(9) + "".join(f"{g:>8.0e}" for g in sweep))
        for dofs in dict.fromkeys(r.dofs for r in sub):
            cells = {r.gamma: r for r in sub if r.dofs == dofs}
            lines.append(f"{dofs:>9}" + "".join(
                f"{cells[g].iters:>7}{'' if cells[g].converged else '!'}" if g in cells else " " * 8
                for g in sweep))
    return "\n".join(lines)


# ---- table comparison ----

KEY = ("experiment", "dofs", "gamma", "solver")


class ShapeMismatch(ValueError):
    pass


@dataclass
class Tolerance:
    """Cell passes when ``|got - ref| <= max(abs, rel * ref)`` and ``got <= max`` (if set)."""

    rel: float = 0.0
    abs: float = 0.0
    max: float = None

    @classmethod
    def parse(cls, text):
        tol = cls()
        for part in filter(None, (p.strip() for p in str(text).split(","))):
            key, _, val = part.partition("=")
            if key not in ("rel", "abs", "max") or not val:
                raise ValueError(f"bad tolerance item {part!r}; use rel=, abs=, max=")
            setattr(tol, key, float(val))
        return tol

    def allows(self, ref, got):
        if self.max is not None and got > self.max:
            return False
        return abs(got - ref) <= max(self.abs, self.rel * abs(ref))


@dataclass
class DiffReport:
    passed: bool
    compared: int
    failures: list

    def __str__(self):
        head = f"{'PASS' if self.passed else 'FAIL'}: {self.compared} cells compared, {len(self.failures)} out of tolerance"
        return "\n".join([head] + [f"  {f}" for f in self.failures])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"gamma", "solver", "iters"} - set(rows[0] if rows else {})
    if missing:
        raise ShapeMismatch(f"{path}: missing columns {sorted(missing)}")
    return rows


def _key(row):
    return tuple("*" if row.get(k, "*") in ("", "*") else
                 (repr(float(row[k])) if k == "gamma" else str(row[k])) for k in KEY)


def _matches(ref_key, got_key):
    return all(r == "*" or r == g for r, g in zip(ref_key, got_key))


def diff_tables(got, ref, tol, subset=False):
    """Compare iteration counts of ``got`` against ``ref`` (lists of dict rows).

    Reference cells may use ``*`` (or leave blank) in key columns to match any
    value. Every reference row must be matched by exactly one result row
    unless ``subset`` is set, in which case unmatched reference rows are
    skipped; result rows with no reference are always a shape mismatch.
    """
    tol = Tolerance.parse(tol) if isinstance(tol, str) else tol
    got_keys = [_key(r) for r in got]
    ref_keys = [_key(r) for r in ref]
    if len(set(got_keys)) != len(got_keys):
        raise ShapeMismatch("duplicate rows in result table")
    used, failures, compared = set(), [], 0
    for rk, rrow in zip(ref_keys, ref):
        hits = [i for i, gk in enumerate(got_keys) if _matches(rk, gk)]
        if len(hits) > 1:
            raise ShapeMismatch(f"reference row {rk} matches {len(hits)} result rows")
        if not hits:
            if subset:
                continue
            raise ShapeMismatch(f"reference row {rk} has no result")
        used.add(hits[0])
        r, g = float(rrow["iters"]), float(got[hits[0]]["iters"])
        compared += 1
        if not tol.allows(r, g):
            failures.append(f"{dict(zip(KEY, got_keys[hits[0]]))}: iters {g:g} vs reference {r:g}")
    extra = [got_keys[i] for i in range(len(got)) if i not in used]
    if extra:
        raise ShapeMismatch(f"{len(extra)} result rows have no reference, first {extra[0]}")
    return DiffReport(not failures, compared, failures)


def reference_path(name):
    """Path of a shipped reference table."""
    return str(resources.files("metric_amg") / "reference" / name)


def config_path(name):
    """Path of a shipped config; ``name`` may omit the ``.toml`` suffix."""
    name = name if name.endswith(".toml") else name + ".toml"
    return str(resources.files("metric_amg") / "configs" / name)


# ---- CLI ----

def _cmd_run(args):
    path = args.config if os.path.isfile(args.config) else config_path(args.config)
    cfg = BenchmarkConfig.load(path)
    if args.workers:
        cfg.workers = args.workers
    out = args.out or cfg.out or "bench_out"
    rows = run_benchmark(cfg)
    write_results(rows, cfg, out)
    print(summarize(rows))
    bad = [r for r in rows if not r.converged]
    if bad:
        print(f"{len(bad)} solves did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return 0


def _cmd_diff(args):
    try:
        report = diff_tables(read_table(args.got), read_table(args.ref), args.tol, subset=args.subset)
    except ShapeMismatch as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return 1
    print(report)
    return 0 if report.passed else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run a benchmark config")
    run.add_argument("--config", required=True,
                     help="TOML or JSON config, or the name of a shipped config (e.g. emi2d)")
    run.add_argument("--out", help="output directory (default from config, else bench_out)")
    run.add_argument("--workers", type=int, default=0, help="process pool size")
    run.set_defaults(func=_cmd_run)
    diff = sub.add_parser("diff", help="compare two result tables")
    diff.add_argument("--ref", required=True)
    diff.add_argument("--got", required=True)
    diff.add_argument("--tol", default="rel=0.2", help="e.g. 'rel=0.2', 'abs=3,max=35'")
    diff.add_argument("--subset", action="store_true",
                      help="skip reference rows absent from the result")
    diff.set_defaults(func=_cmd_diff)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
