"""Command-line experiment runner (``ssep-lab``)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import (ConfigError, CylinderSpec, ExperimentConfig, KernelSpec, ProfileSpec,
                     TestFunctionSpec, merge, parse_mapping, read_tree)

log = logging.getLogger("ssep_lab")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BUDGET = 3
COMMAND_IDS = {"solve": 1, "simulate": 2, "bound": 3, "vfunctions": 4, "two-time": 5,
               "bg": 6, "lsi": 7}


def code_hash() -> str:
    """sha256 over the package sources, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


class CsvOut:
    """CSV writer that flushes every row so partial results survive a budget stop."""

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = path
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(header)
        self.fh.flush()

    def row(self, *vals) -> None:
        self.w.writerow([_fmt(v) for v in vals])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self._clear_previous()
        self.files: list[Path] = []
        self._open: list[CsvOut] = []

    def _clear_previous(self) -> None:
        old = self.out / "manifest.json"
        if not old.exists():
            return
        try:
            names = json.loads(old.read_text()).get("outputs", {})
        except (json.JSONDecodeError, AttributeError):
            names = {}
        for name in names:
            (self.out / Path(name).name).unlink(missing_ok=True)
        old.unlink()

    def csv(self, name: str, header: Sequence[str]) -> CsvOut:
        c = CsvOut(self.out / name, header)
        self.files.append(c.path)
        self._open.append(c)
        return c

    def add_file(self, path: Path) -> None:
        self.files.append(path)

    def rng(self, *stream: int):
        from .simulate import RngStream
        return RngStream(self.cfg.seed, (COMMAND_IDS[self.cfg.command],) + tuple(stream))

    def finish(self, status: str, message: str = "") -> None:
        for c in self._open:
            c.close()
        outputs = {}
        for p in self.files:
            outputs[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {"package_version": __version__, "code_hash": code_hash(),
                    "status": status, "message": message, "config": self.cfg.resolved(),
                    "outputs": outputs}
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _z_points(cfg: ExperimentConfig, d: int) -> list[tuple[int, ...]]:
    if cfg.z is not None:
        pts = [tuple(p) for p in cfg.z]
    else:
        pts = [(i,) + (0,) * (d - 1) for i in range(cfg.n)]
    if any(len(p) != d for p in pts):
        raise ConfigError("field 'z': points must have the kernel dimension")
    return pts


def do_solve(run: Run) -> None:
    from .forward import solve_forward, solve_forward_infinite
    from .generator import build_generator
    from .lattice import Box, LabeledConfig, UnlabeledConfig, enumerate_states
    cfg = run.cfg
    kernel = cfg.kernel.build()
    pts = _z_points(cfg, kernel.d)
    times = cfg.times or [cfg.T]
    if cfg.L is None:
        series, op = solve_forward_infinite(kernel, pts, times, labeled=cfg.labeled)
    else:
        box = Box(kernel.d, cfg.L, "open")
        space = enumerate_states(box, len(pts), cfg.labeled)
        op = build_generator(space, kernel)
        op.kernel = kernel
        z = LabeledConfig(pts) if cfg.labeled else UnlabeledConfig(pts)
        series = solve_forward(op, space.index(z), times)
    series.to_csv(run.out / "series.csv")
    run.add_file(run.out / "series.csv")
    st = run.csv("states.csv", ["state", "coords"])
    for i, c in enumerate(series.space.coords()):
        st.row(i, [int(v) for v in np.ravel(c)])
    bm = run.csv("boundary.csv", ["time", "boundary_mass"])
    for t, b in zip(series.times, series.boundary_mass):
        bm.row(float(t), float(b))
    if cfg.binary:
        series.to_binary(run.out / "series.bin")
        run.add_file(run.out / "series.bin")


def do_simulate(run: Run) -> None:
    from .lattice import LabeledConfig
    from .simulate import EventBudgetExceeded, estimate_transition
    cfg = run.cfg
    kernel = cfg.kernel.build()
    if cfg.replicas < 1:
        raise ConfigError("field 'replicas': simulate needs at least one replica")
    z = LabeledConfig(_z_points(cfg, kernel.d))
    try:
        est = estimate_transition(kernel, z, cfg.T, cfg.replicas, run.rng(), cfg.max_events)
    except EventBudgetExceeded as err:
        if err.partial is not None:
            _write_histograms(run, err.partial)
        raise
    _write_histograms(run, est)


def _write_histograms(run: Run, est) -> None:
    from .simulate import histogram_to_csv
    for name, hist in (("histogram_labeled.csv", est.labeled),
                       ("histogram_unlabeled.csv", est.unlabeled)):
        histogram_to_csv(hist, run.out / name)
        run.add_file(run.out / name)


def parse_range(spec: str) -> np.ndarray:
    """``a:b:c`` → a, a+c, …, b (inclusive up to rounding)."""
    try:
        a, b, c = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigError(f"field 'phi_table': expected a:b:c, got {spec!r}") from None
    if c <= 0 or b < a or a < 0:
        raise ConfigError("field 'phi_table': need 0 <= a <= b and c > 0")
    k = int(np.floor((b - a) / c + 1e-9))
    return a + c * np.arange(k + 1)


def do_bound(run: Run) -> None:
    from .bounds import legendre_phi, tail_fit
    from .forward import solve_forward_infinite
    from .lattice import LabeledConfig, UnlabeledConfig
    cfg = run.cfg
    if cfg.phi_table is not None:
        out = run.csv("phi_table.csv", ["u", "phi"])
        for u in parse_range(cfg.phi_table):
            out.row(float(u), legendre_phi(float(u)))
        return
    kernel = cfg.kernel.build()
    pts = _z_points(cfg, kernel.d)
    times = cfg.times or [cfg.T]
    if min(times) <= np.e:
        raise ConfigError("field 'times': tail fits need every T > e")
    series, _ = solve_forward_infinite(kernel, pts, times, labeled=cfg.labeled)
    out = run.csv("tail_fits.csv", ["T", "a1_hat", "C2_hat", "residual", "n_states"])
    zc = LabeledConfig(pts) if cfg.labeled else UnlabeledConfig(pts)
    for T in times:
        fit = tail_fit(series, zc, T, gamma=cfg.gamma)
        out.row(float(T), fit.a1_hat, fit.C2_hat, fit.residual, fit.n_states)


def slope_so_far(recs: Sequence[tuple[int, float]]) -> float:
    """Log-log slope of |value| against N over the rows seen so far."""
    pts = [(n, abs(v)) for n, v in recs if v != 0]
    if len({n for n, _ in pts}) < 2:
        return float("nan")
    x, y = np.log([n for n, _ in pts]), np.log([v for _, v in pts])
    return float(np.polyfit(x, y, 1)[0])


def _profile(cfg: ExperimentConfig, N: int, L: int) -> Callable:
    return cfg.profile.build(N, 2 * L + 1)


def do_vfunctions(run: Run) -> None:
    from .correlations import (CorrelationContext, estimate_vfunction,
                               solve_vfunction, sup_abs_vfunction)
    cfg = run.cfg
    kernel = cfg.kernel.build()
    times = cfg.times or [cfg.T]
    rows = run.csv("vfunctions.csv", ["N", "t", "set", "phi", "method", "stderr"])
    scal = run.csv("vfunction_scaling.csv", ["N", "sup_abs_phi", "slope_so_far"])
    recs = []
    for N in cfg.Ns:
        L = cfg.torus_L(N)
        ctx = CorrelationContext(kernel, N, _profile(cfg, N, L), times, L=L,
                                 max_card=max(cfg.max_card, len(cfg.A)),
                                 convention=cfg.convention, rtol=cfg.rtol).solve()
        for r in solve_vfunction(cfg.A, times, ctx):
            rows.row(N, r.t, list(cfg.A), r.value, r.method, r.error)
        if cfg.replicas > 0:
            for i, t in enumerate(times):
                r = estimate_vfunction(cfg.A, t, ctx, cfg.replicas, run.rng(N, i))
                rows.row(N, r.t, list(cfg.A), r.value, r.method, r.error)
        sup = sup_abs_vfunction(ctx, len(cfg.A))
        recs.append((N, sup))
        scal.row(N, sup, slope_so_far(recs))


def do_two_time(run: Run) -> None:
    from .correlations import CorrelationContext, two_time_bracket, two_time_table
    cfg = run.cfg
    kernel = cfg.kernel.build()
    B_sets = cfg.B_sets or [cfg.A]
    k = len(B_sets[0])
    if any(len(B) != k for B in B_sets):
        raise ConfigError("field 'B_sets': all sets must have the same size")
    rows = run.csv("two_time.csv", ["N", "s", "t", "A", "B", "R", "U_part", "duhamel_part"])
    shape = run.csv("two_time_shape.csv", ["N", "r", "max_abs_R", "bracket", "ratio"])
    for N in cfg.Ns:
        L = cfg.torus_L(N)
        rs = cfg.r_values or sorted({0.0, N ** -2.0, 10.0 * N ** -2.0, 0.1, 0.5})
        ctx = CorrelationContext(kernel, N, _profile(cfg, N, L), [cfg.s], L=L,
                                 max_card=cfg.max_card, convention=cfg.convention,
                                 rtol=cfg.rtol).solve()
        tab = two_time_table(cfg.s, cfg.A, rs, k, ctx)
        for i, r in enumerate(rs):
            for B in B_sets:
                R, U = tab.value(i, ctx, B)
                rows.row(N, cfg.s, cfg.s + r, list(cfg.A), list(B), R, U, R - U)
            m = float(np.abs(tab.R[i]).max())
            br = two_time_bracket(r, N)
            shape.row(N, float(r), m, br, m / br)


def do_bg(run: Run) -> None:
    from .bg import (BGContext, CylinderFunction, TestFunction, bg_run, gamma_spec,
                     gaussian_test_function, product_spec)
    cfg = run.cfg
    kernel = cfg.kernel.build()
    if cfg.H.kind == "gaussian":
        H = gaussian_test_function(cfg.H.width)
    else:
        w = cfg.H.width
        H = TestFunction(lambda u: np.where(np.abs(u) < w, (1 - (np.asarray(u) / w) ** 2) ** 2, 0.0),
                         "compact", f"bump({w})")
    specs = []
    if len(set(cfg.A)) > 2:
        specs.append(product_spec(cfg.A))
    if cfg.cylinder is not None:
        specs.append(gamma_spec(CylinderFunction(tuple(cfg.cylinder.support),
                                                 np.array(cfg.cylinder.table))))
    if not specs:
        raise ConfigError("field 'A': need |A| > 2 or a cylinder function")
    if cfg.replicas < 2:
        raise ConfigError("field 'replicas': bg needs at least two replicas")
    out = run.csv("bg.csv", ["N", "statistic", "estimate", "stderr", "richardson_rel",
                             "slope_so_far"])
    hist: dict[str, list] = {s.label: [] for s in specs}
    for N in cfg.Ns:
        L = cfg.torus_L(N)
        ctx = BGContext(kernel, N, _profile(cfg, N, L), L=L)
        for est in bg_run(H, specs, cfg.T, N, ctx, cfg.replicas, run.rng(N),
                          max_events=cfg.max_events):
            hist[est.label].append((N, est.estimate))
            out.row(N, est.label, est.estimate, est.stderr, est.richardson_rel,
                    slope_so_far(hist[est.label]))


def do_lsi(run: Run) -> None:
    from .lsi import build_path, cube_space, lsi_ratio_max, random_path_pairs
    cfg = run.cfg
    kernel = cfg.kernel.build()
    out = run.csv("lsi.csv", ["ell", "n", "c_hat", "c_hat_over_ell2", "restarts", "converged"])
    paths = None
    if cfg.m >= 2 and kernel.d == 1 and cfg.path_pairs > 0:
        paths = run.csv("paths.csv", ["ell", "m", "pairs", "max_length", "bound", "all_valid"])
    for ell in cfg.ell_values:
        space = cube_space(ell, cfg.m, kernel.d, kernel)
        res = lsi_ratio_max(space, iterations=cfg.iterations,
                            rng=run.rng(ell).generator(), random_starts=cfg.random_starts)
        out.row(ell, cfg.m, res.c_hat, res.c_hat / ell ** 2, res.restarts, res.converged)
        if paths is not None:
            recs = [build_path(x, y) for x, y in
                    random_path_pairs(ell, cfg.m, cfg.path_pairs, run.rng(ell, 1).generator())]
            paths.row(ell, cfg.m, len(recs), max(r.length for r in recs),
                      3.0 * cfg.m * ell, all(r.validate(kernel) for r in recs))


DISPATCH = {"solve": do_solve, "simulate": do_simulate, "bound": do_bound,
            "vfunctions": do_vfunctions, "two-time": do_two_time, "bg": do_bg, "lsi": do_lsi}


def execute(cfg: ExperimentConfig) -> int:
    """Run one experiment; writes CSVs plus ``manifest.json`` into ``cfg.output``."""
    from .correlations import RichardsonError
    from .forward import UniformizationError
    from .lattice import StateSpaceTooLarge
    from .simulate import EventBudgetExceeded
    run = Run(cfg)
    try:
        DISPATCH[cfg.command](run)
    except (EventBudgetExceeded, UniformizationError, RichardsonError, StateSpaceTooLarge) as err:
        run.finish("budget_exceeded", str(err))
        print(f"budget exceeded: {err}", file=sys.stderr)
        return EXIT_BUDGET
    run.finish("ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssep-lab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp):
        sp.add_argument("--params", help="experiment config (TOML or JSON)")
        sp.add_argument("--out", dest="output", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--kernel", dest="kernel_file", help="kernel spec file")
        sp.add_argument("--profile", dest="profile_file", help="profile spec file")
        sp.add_argument("--T", type=float)
        sp.add_argument("--replicas", type=int)

    sp = sub.add_parser("solve", help="exact forward solve of the finite-particle chain")
    common(sp)
    sp.add_argument("--config", dest="z_file", help="initial configuration (JSON list of points)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--labeled", action="store_true", default=None)
    sp.add_argument("--L", type=int)
    sp.add_argument("--times", type=_floats)
    sp.add_argument("--binary", action="store_true", default=None)

    sp = sub.add_parser("simulate", help="Monte Carlo endpoint histogram of the stirring process")
    common(sp)
    sp.add_argument("--config", dest="z_file", help="initial configuration (JSON list of points)")
    sp.add_argument("--max-events", dest="max_events", type=int, help="event budget per chunk")

    sp = sub.add_parser("bound", help="Φ tables and Gaussian tail fits")
    common(sp)
    sp.add_argument("--phi-table", dest="phi_table", help="a:b:c grid of u values")
    sp.add_argument("--config", dest="z_file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--labeled", action="store_true", default=None)
    sp.add_argument("--times", type=_floats)
    sp.add_argument("--gamma", type=float)

    sp = sub.add_parser("vfunctions", help="v-function hierarchy and its N-scaling")
    common(sp)
    sp.add_argument("--Ns", type=_ints)
    sp.add_argument("--A", type=_ints)
    sp.add_argument("--times", type=_floats)
    sp.add_argument("--max-card", dest="max_card", type=int)

    sp = sub.add_parser("two-time", help="two-time correlations R_N(s, A; t, B)")
    common(sp)
    sp.add_argument("--Ns", type=_ints)
    sp.add_argument("--A", type=_ints)
    sp.add_argument("--s", type=float)
    sp.add_argument("--r-values", dest="r_values", type=_floats)
    sp.add_argument("--max-card", dest="max_card", type=int)

    sp = sub.add_parser("bg", help="Boltzmann-Gibbs Monte Carlo statistics")
    common(sp)
    sp.add_argument("--Ns", type=_ints)
    sp.add_argument("--A", type=_ints)
    sp.add_argument("--cylinder", dest="cylinder_file", help="cylinder function (JSON)")
    sp.add_argument("--H", dest="H_file", help="test function spec (JSON)")

    sp = sub.add_parser("lsi", help="log-Sobolev ratio audit and canonical paths")
    common(sp)
    sp.add_argument("--ells", dest="ell_values", type=_ints)
    sp.add_argument("--m", type=int)
    sp.add_argument("--iterations", type=int)

    sp = sub.add_parser("run", help="run a config file or rerun a manifest")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--params", help="experiment config (TOML or JSON)")
    g.add_argument("--manifest", help="manifest.json from an earlier run")
    sp.add_argument("--out", dest="output", help="output directory")
    return p


_FILE_FIELDS = {"kernel_file": ("kernel", KernelSpec), "profile_file": ("profile", ProfileSpec),
                "cylinder_file": ("cylinder", CylinderSpec), "H_file": ("H", TestFunctionSpec)}
_SKIP = {"command", "params", "verbose", "manifest", "z_file", *_FILE_FIELDS}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.command == "run":
        if args.manifest:
            tree = read_tree(args.manifest).get("config")
            if not isinstance(tree, dict):
                raise ConfigError(f"{args.manifest}: no 'config' section")
        else:
            tree = read_tree(args.params)
        return parse_mapping(merge(tree, {"output": args.output}))
    tree = read_tree(args.params) if args.params else {}
    tree = merge(tree, {"command": args.command})
    over = {k: v for k, v in vars(args).items() if k not in _SKIP}
    for attr, (key, _model) in _FILE_FIELDS.items():
        path = getattr(args, attr, None)
        if path:
            over[key] = read_tree(path)
    if getattr(args, "z_file", None):
        pts = read_tree(args.z_file)
        over["z"] = [[p] if isinstance(p, int) else list(p) for p in pts]
    return parse_mapping(merge(tree, over))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return execute(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
