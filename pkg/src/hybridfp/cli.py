"""Command-line driver: trajectory runs, density evolution, Jacobian tables,
PDE-vs-oracle comparison, and reduction verification.

Runs are configured by a flat-section key/value file (INI grammar); any key
can be overridden on the command line with ``--set section.key=value`` and a
few common shortcuts.  Exit codes partition outcomes so shell checks can
assert on them: 0 ok, 1 comparison threshold exceeded, 2 Zeno termination,
3 left domain, 64 configuration error, 65 solver error, 66 grid mismatch.

Config sections and keys::

    [run]        model, output_dir, f0, threshold
    [params]     model parameters (m, g, c, alpha, a, I, theta0, E)
    [grid]       lower, upper, shape, periodic, sheets
    [solver]     dt, interpolation, boundary, substeps, snapshots
    [integrator] dt_max, impact_tol, max_impacts, min_interevent, nudge
    [oracle]     n_samples, seed, bound
"""

from __future__ import annotations

import argparse
import configparser
import sys as _sys
from pathlib import Path

import numpy as np

from . import models, oracle, reduction, snapshots, transfer, volume
from .core import DomainBox, HybridError, GridMismatchError, HybridSystem
from .flow import IntegratorConfig, Termination, integrate
from .transfer import GridSpec, SolverConfig

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_ZENO = 2
EXIT_LEFT_DOMAIN = 3
EXIT_CONFIG = 64
EXIT_SOLVER = 65
EXIT_GRID = 66


class ConfigError(Exception):
    pass


_PARAM_KEYS = {
    "ball": {"m": "m", "g": "g", "c": "c"},
    "ball-inelastic": {"m": "m", "g": "g", "c": "c"},
    "filippov": {"alpha": "alpha"},
    "chaplygin3d": {"m": "m", "a": "a", "i": "inertia", "theta0": "theta0"},
    "chaplygin2d": {"m": "m", "a": "a", "i": "inertia", "theta0": "theta0",
                    "e": "energy"},
    "gl2": {},
    "qc": {},
}


def _load_sections(path: str | None) -> dict:
    cfg = {}
    if path:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        for sec in cp.sections():
            if sec == "manifest":
                continue
            cfg[sec] = dict(cp[sec])
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        sec, k = key.split(".", 1)
        cfg.setdefault(sec, {})[k] = value
    shortcuts = {
        "model": ("run", "model"), "out": ("run", "output_dir"),
        "f0": ("run", "f0"), "threshold": ("run", "threshold"),
        "c": ("params", "c"), "alpha": ("params", "alpha"),
        "seed": ("oracle", "seed"), "n_samples": ("oracle", "n_samples"),
    }
    for attr, (sec, key) in shortcuts.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.setdefault(sec, {})[key] = str(val)
    return cfg


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def build_system(cfg: dict) -> HybridSystem:
    run = cfg.get("run", {})
    model_id = run.get("model")
    if not model_id:
        raise ConfigError("missing run.model")
    if model_id not in models.MODEL_IDS:
        raise ConfigError(
            f"unknown model {model_id!r}; known: {', '.join(models.MODEL_IDS)}")
    keymap = _PARAM_KEYS[model_id]
    kwargs = {}
    for key, value in cfg.get("params", {}).items():
        k = key.lower()
        if k not in keymap:
            raise ConfigError(f"model {model_id}: unknown parameter {key!r}")
        try:
            kwargs[keymap[k]] = float(value)
        except ValueError:
            raise ConfigError(f"params.{key}: not a number: {value!r}")
    try:
        return models.make(model_id, **kwargs)
    except HybridError as exc:
        raise ConfigError(str(exc))


def build_grid(cfg: dict, sys: HybridSystem) -> GridSpec:
    g = cfg.get("grid", {})
    try:
        lower = _floats(g["lower"]) if "lower" in g else list(sys.box.lower)
        upper = _floats(g["upper"]) if "upper" in g else list(sys.box.upper)
        shape = tuple(int(v) for v in g["shape"].split(",")) if "shape" in g \
            else (64,) * sys.dim
        periodic = [int(v) for v in g.get("periodic", "").split(",") if v != ""] \
            if "periodic" in g else sorted(sys.box.periodic_axes)
        sheets = int(g.get("sheets", sys.sheets))
        box = DomainBox.make(lower, upper, periodic)
        return GridSpec(box=box, shape=shape, sheet_count=sheets)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [grid] section: {exc}")


def build_solver(cfg: dict) -> SolverConfig:
    s = cfg.get("solver", {})
    try:
        return SolverConfig(
            dt=float(s.get("dt", "0.01")),
            interpolation=s.get("interpolation", "nearest"),
            boundary=s.get("boundary", "zero_inflow"),
            jump_detection_substeps=int(s.get("substeps", "8")),
            snapshot_times=tuple(_floats(s.get("snapshots", "0"))),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [solver] section: {exc}")


def build_integrator(cfg: dict) -> IntegratorConfig:
    s = cfg.get("integrator", {})
    try:
        min_ie = s.get("min_interevent")
        return IntegratorConfig(
            dt_max=float(s.get("dt_max", "1e-3")),
            impact_tol=float(s.get("impact_tol", "1e-10")),
            max_impacts=int(s.get("max_impacts", "1000")),
            min_interevent_time=float(min_ie) if min_ie is not None else None,
            post_reset_nudge=float(s.get("nudge", "1e-9")),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [integrator] section: {exc}")


def resolve_f0(cfg: dict, sys: HybridSystem):
    name = cfg.get("run", {}).get("f0", "uniform")
    try:
        return models.initial_density(name, sys)
    except KeyError:
        pass
    # otherwise a numpy expression in x1..xn (single-sheet systems only)
    if sys.sheets > 1:
        raise ConfigError(f"unknown builtin density {name!r} for sheeted model")
    expr = name

    def f(pts):
        pts = np.asarray(pts, dtype=float)
        namespace = {"np": np}
        for i in range(sys.dim):
            namespace[f"x{i+1}"] = pts[..., i]
        try:
            return np.broadcast_to(
                np.asarray(eval(expr, {"__builtins__": {}}, namespace),
                           dtype=float), pts.shape[:-1]).copy()
        except Exception as exc:
            raise ConfigError(f"bad density expression {expr!r}: {exc}")

    f(np.zeros((2, sys.dim)))  # fail fast on typos
    return f


def _outdir(cfg: dict) -> Path:
    out = Path(cfg.get("run", {}).get("output_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_trajectory(cfg: dict, args) -> int:
    sys = build_system(cfg)
    if args.x0 is None:
        raise ConfigError("trajectory needs --x0")
    x0 = np.asarray(_floats(args.x0))
    if x0.shape != (sys.dim,):
        raise ConfigError(
            f"--x0 has dimension {len(x0)}, model {sys.name} needs {sys.dim}")
    icfg = build_integrator(cfg)
    traj = integrate(sys, x0, 0.0, float(args.T), icfg)
    out = _outdir(cfg)
    snapshots.write_trajectory(out / "trajectory.csv", traj)
    snapshots.write_events(out / "events.csv", traj)
    snapshots.write_manifest(out / "manifest.txt", sys.name, cfg,
                             trajectories=["trajectory.csv"],
                             extra={"events": "events.csv",
                                    "terminated": traj.terminated.value})
    print(f"model={sys.name} T={args.T} samples={len(traj.times)} "
          f"events={len(traj.events)} terminated={traj.terminated.value}")
    if traj.terminated == Termination.ZENO_LIMIT:
        return EXIT_ZENO
    if traj.terminated == Termination.LEFT_DOMAIN:
        return EXIT_LEFT_DOMAIN
    if traj.terminated == Termination.NON_FINITE:
        return EXIT_SOLVER
    return EXIT_OK


def cmd_evolve(cfg: dict, args) -> int:
    sys = build_system(cfg)
    grid = build_grid(cfg, sys)
    scfg = build_solver(cfg)
    f0 = resolve_f0(cfg, sys)
    out = _outdir(cfg)
    snaps = transfer.evolve(sys, f0, grid, scfg)
    names = []
    print("snapshot  t         mass")
    for i, snap in enumerate(snaps):
        name = f"snapshot_{i:04d}.csv"
        snapshots.write_snapshot(out / name, snap, source="solver",
                                 model=sys.name)
        names.append(name)
        print(f"{i:8d}  {snap.t:<8.4g}  {snap.mass:.6g}")
    snapshots.write_manifest(out / "manifest.txt", sys.name, cfg,
                             snapshots=names)
    return EXIT_OK


def _oracle_field(cfg: dict, sys: HybridSystem, grid: GridSpec, f0, t: float):
    ocfg = cfg.get("oracle", {})
    n = int(float(ocfg.get("n_samples", "100000")))
    seed = int(ocfg.get("seed", "0"))
    if "bound" in ocfg:
        bound = float(ocfg["bound"])
    else:
        nodes = transfer.grid_nodes(grid)
        bound = 1.2 * float(np.max(f0(nodes))) + 1e-12
    icfg = build_integrator(cfg)
    cloud = oracle.sample(f0, grid.box, n, seed, bound)
    cloud = oracle.push(cloud, sys, t, icfg)
    return oracle.histogram(cloud, grid), cloud


def cmd_compare(cfg: dict, args) -> int:
    sys = build_system(cfg)
    if sys.sheets > 1:
        raise ConfigError("compare drives single-chart models only")
    grid = build_grid(cfg, sys)
    scfg = build_solver(cfg)
    f0 = resolve_f0(cfg, sys)
    threshold = float(cfg.get("run", {}).get("threshold", "0.1"))
    times = [t for t in scfg.snapshot_times if t > 0]
    if not times:
        raise ConfigError("compare needs positive solver.snapshots times")
    snaps = transfer.evolve(sys, f0, grid, scfg)
    out = _outdir(cfg)
    lines = ["time      l1        linf      mass_pde  mass_mc   dead_frac"]
    worst = 0.0
    idx = 0
    for snap in snaps:
        if snap.t <= 0:
            continue
        hist, cloud = _oracle_field(cfg, sys, grid, f0, snap.t)
        snapshots.write_snapshot(out / f"oracle_{idx:04d}.csv", hist,
                                 source="oracle", model=sys.name)
        idx += 1
        res = oracle.compare(snap, hist)
        worst = max(worst, res.l1)
        lines.append(f"{snap.t:<8.4g}  {res.l1:<8.4f}  {res.linf:<8.4g}  "
                     f"{res.mass_a:<8.4g}  {res.mass_b:<8.4g}  "
                     f"{cloud.dead_fraction:.4f}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    (out / "compare.txt").write_text(report)
    return EXIT_OK if worst <= threshold else EXIT_THRESHOLD


def cmd_jacobian(cfg: dict, args) -> int:
    sys = build_system(cfg)
    sampler = sys.params.get("sample_guard")
    if sampler is None:
        raise ConfigError(f"model {sys.name} has no guard sampler")
    rng = np.random.default_rng(int(args.seed or 0))
    pts = sampler(int(args.points), rng)
    print("guard point" + " " * 25 + "jacobian      cond      residual")
    for x in pts:
        rep = volume.hybrid_jacobian(sys, x)
        coords = ",".join(f"{v: .4f}" for v in x)
        print(f"[{coords:<32}]  {rep.jac: .8f}  {rep.cond:8.2e}  "
              f"{rep.basis_residual:8.2e}")
    return EXIT_OK


def cmd_reduce_verify(cfg: dict, args) -> int:
    case = args.case
    icfg = IntegratorConfig(dt_max=1e-4, impact_tol=1e-12, max_impacts=100)
    if case == "gl2":
        full = models.make_gl2_full()
        red = models.make_gl2_model()
        a0 = np.array([[1.2, 0.1], [0.0, 1.0]])
        zeta0 = np.array([[-0.4, 0.3], [0.2, -0.6]])
        p0 = np.linalg.solve(a0.T, zeta0)
        x0 = np.concatenate([a0.reshape(-1), p0.reshape(-1)])
        report = reduction.verify_reduction(
            full, red, full.params["momentum_map"], x0, float(args.T or 1.5), icfg)
        ok = (report.max_state_mismatch < 1e-5 and report.matched_events
              and report.impact_time_mismatch < 1e-6)
    elif case == "chaplygin":
        full = models.make_chaplygin_full()
        red = models.make_chaplygin3d()
        th0 = 0.2
        x0 = np.array([0.0, 0.0, th0, 1.2 * np.cos(th0), 1.2 * np.sin(th0), 0.8])
        report = reduction.verify_reduction(
            full, red, full.params["to_reduced"], x0, float(args.T or 2.0), icfg)
        ok = report.max_state_mismatch < 1e-5 and report.matched_events
    elif case == "aff1":
        full = models.make_aff1_full()
        red = models.make_aff1_reduced()
        x0 = np.array([2.0, 0.5, 0.15, 0.5])
        report = reduction.verify_reduction(
            full, red, full.params["momentum_map"], x0, float(args.T or 3.0), icfg)
        ok = report.max_state_mismatch > 0.1  # the non-normal counterexample
    else:
        raise ConfigError(f"unknown case {case!r}")
    print(f"case={case} max_mismatch={report.max_state_mismatch:.3e} "
          f"impact_dt={report.impact_time_mismatch:.3e} "
          f"events={report.n_events_full}/{report.n_events_reduced} "
          f"post_impact={report.post_impact_mismatch:.3e} "
          f"-> {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_THRESHOLD


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hybridfp",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="model ids: " + ", ".join(models.MODEL_IDS))
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (results are identical for any value)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file (or a run manifest)")
        sp.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                        help="override a config key")
        sp.add_argument("--model", help="model id")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--f0", help="initial density: builtin id or expression")
        sp.add_argument("--c", type=float, help="restitution parameter")
        sp.add_argument("--alpha", type=float, help="Filippov parameter")
        sp.add_argument("--threshold", type=float, help="compare threshold")
        sp.add_argument("--seed", type=int, help="oracle seed")
        sp.add_argument("--n-samples", dest="n_samples", type=int,
                        help="oracle ensemble size")

    sp = sub.add_parser("trajectory", help="integrate one hybrid trajectory")
    common(sp)
    sp.add_argument("--x0", help="initial state, comma separated")
    sp.add_argument("--T", type=float, default=1.0, help="final time")
    sp.set_defaults(func=cmd_trajectory)

    sp = sub.add_parser("evolve", help="evolve a density with the PDE solver")
    common(sp)
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("compare", help="PDE solver vs Monte-Carlo oracle")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("jacobian", help="hybrid Jacobian table at guard points")
    common(sp)
    sp.add_argument("--points", type=int, default=5)
    sp.set_defaults(func=cmd_jacobian)

    sp = sub.add_parser("reduce-verify", help="full vs reduced trajectories")
    common(sp)
    sp.add_argument("--case", choices=["gl2", "chaplygin", "aff1"], required=True)
    sp.add_argument("--T", type=float, default=None)
    sp.set_defaults(func=cmd_reduce_verify)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_sections(getattr(args, "config", None))
        cfg = _apply_overrides(cfg, args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except GridMismatchError as exc:
        print(f"grid mismatch: {exc}", file=_sys.stderr)
        return EXIT_GRID
    except HybridError as exc:
        print(f"solver error: {exc}", file=_sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
