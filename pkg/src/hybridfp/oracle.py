"""Definition-based transfer operator: push a sampled cloud through the
hybrid flow and histogram it.

This is the ground truth the PDE solver is checked against: sample the
initial density, advance every point with event-detected integration, and
bin the survivors.  Mass over alive points is conserved exactly by
construction.  The generator is counter-based (Philox), so runs are
reproducible from the seed alone regardless of batching.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import DomainBox, GridMismatchError, HybridSystem, SamplingStallError
from .flow import IntegratorConfig
from .transfer import DensityField, GridSpec, grid_nodes

__all__ = [
    "EnsembleCloud",
    "CompareResult",
    "sample",
    "push",
    "histogram",
    "compare",
]


@dataclass
class EnsembleCloud:
    """Weighted sample points evolved by the hybrid flow."""

    points: np.ndarray
    t: float
    seed: int
    alive: np.ndarray
    impacts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    @property
    def dead_fraction(self) -> float:
        return 1.0 - self.n_alive / self.n


def sample(f0: Callable, box: DomainBox, n: int, seed: int,
           bound: float) -> EnsembleCloud:
    """Rejection-sample n points from f0 against a uniform box proposal.

    ``bound`` must dominate f0 on the box.  Deterministic given the seed.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    lo, ext = box.lo, box.extent
    out = np.empty((n, box.dim))
    got = 0
    drawn = 0
    batch = max(4 * n, 1024)
    while got < n:
        u = rng.random((batch, box.dim))
        pts = lo + u * ext
        height = rng.random(batch) * bound
        vals = np.asarray(f0(pts), dtype=float)
        if np.any(vals > bound * (1 + 1e-12)):
            raise ValueError("f0 exceeds the declared bound on the box")
        acc = pts[height < vals]
        take = min(len(acc), n - got)
        out[got:got + take] = acc[:take]
        got += take
        drawn += batch
        if drawn >= 1_000_000 and got < max(1, drawn * 1e-4):
            raise SamplingStallError(
                f"acceptance rate {got / drawn:.2e} below 1e-4")
    return EnsembleCloud(points=out, t=0.0, seed=seed,
                         alive=np.ones(n, dtype=bool),
                         impacts=np.zeros(n, dtype=int))


def _bisect_batch(sys: HybridSystem, pts: np.ndarray, h: np.ndarray,
                  s_lo: np.ndarray, tol: float):
    """Vectorized bisection of guard crossings along per-row RK4 steps."""

    def f(p):
        return np.asarray(sys.vector_field(p), dtype=float)

    def step(p, hh):
        k1 = f(p)
        k2 = f(p + 0.5 * hh[:, None] * k1)
        k3 = f(p + 0.5 * hh[:, None] * k2)
        k4 = f(p + hh[:, None] * k3)
        return p + (hh[:, None] / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    f_lo = np.zeros(len(pts))
    f_hi = np.ones(len(pts))
    x_hit = pts.copy()
    for _ in range(60):
        f_mid = 0.5 * (f_lo + f_hi)
        x_hit = step(pts, f_mid * h)
        s_mid = np.asarray(sys.guard_level(x_hit), dtype=float)
        if np.all(np.abs(s_mid) < tol):
            break
        lower = s_lo * s_mid > 0
        f_lo = np.where(lower, f_mid, f_lo)
        f_hi = np.where(lower, f_hi, f_mid)
    f_mid = 0.5 * (f_lo + f_hi)
    x_hit = step(pts, f_mid * h)
    s_hit = np.asarray(sys.guard_level(x_hit), dtype=float)
    genuine = np.abs(s_hit) <= np.maximum(1e-9 * np.abs(s_lo), tol)
    return f_mid, x_hit, genuine


def push(cloud: EnsembleCloud, sys: HybridSystem, duration: float,
         cfg: IntegratorConfig) -> EnsembleCloud:
    """Advance every alive point by the hybrid flow over `duration`.

    Per-point failures (Zeno, domain exit, non-finite states) mark the point
    dead and freeze it; no exception escapes.  duration = 0 is the identity.
    """
    if duration == 0.0:
        return replace(cloud, points=cloud.points.copy(),
                       alive=cloud.alive.copy(), impacts=cloud.impacts.copy())
    pts = cloud.points.copy()
    alive = cloud.alive.copy()
    impacts = cloud.impacts.copy()
    wrap = bool(sys.box.periodic_axes)
    n_steps = int(np.ceil(duration / cfg.dt_max))
    h_full = duration / n_steps

    def f(p):
        return np.asarray(sys.vector_field(p), dtype=float)

    for _ in range(n_steps):
        act = np.flatnonzero(alive)
        if act.size == 0:
            break
        rem = np.full(act.size, h_full)
        p = pts[act]
        for _sub in range(4 * cfg.max_impacts + 8):
            live = rem > 1e-15 * h_full
            if not np.any(live):
                break
            idx = np.flatnonzero(live)
            q = p[idx]
            hh = rem[idx]
            s0 = np.asarray(sys.guard_level(q), dtype=float)
            k1 = f(q)
            k2 = f(q + 0.5 * hh[:, None] * k1)
            k3 = f(q + 0.5 * hh[:, None] * k2)
            k4 = f(q + hh[:, None] * k3)
            q_new = q + (hh[:, None] / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            s1 = np.asarray(sys.guard_level(q_new), dtype=float)
            crossed = s0 * s1 < 0
            done = ~crossed
            p[idx[done]] = q_new[done]
            rem[idx[done]] = 0.0
            hot = np.flatnonzero(crossed)
            if hot.size == 0:
                continue
            frac, x_hit, genuine = _bisect_batch(sys, q[hot], hh[hot], s0[hot],
                                                 cfg.impact_tol)
            armed = np.asarray(sys.guard_armed(x_hit), dtype=bool) & genuine
            through = ~armed
            p[idx[hot[through]]] = q_new[hot[through]]
            rem[idx[hot[through]]] = 0.0
            fire = np.flatnonzero(armed)
            if fire.size == 0:
                continue
            rows = idx[hot[fire]]
            gpts = np.asarray(sys.reset(x_hit[fire]), dtype=float)
            gpts = gpts + cfg.post_reset_nudge * f(gpts)
            p[rows] = gpts
            rem[rows] = np.maximum(
                rem[rows] - frac[fire] * hh[hot[fire]] - cfg.post_reset_nudge, 0.0)
            impacts[act[rows]] += 1
            over = impacts[act[rows]] > cfg.max_impacts
            if np.any(over):
                dead_rows = rows[over]
                alive[act[dead_rows]] = False
                rem[dead_rows] = 0.0
        else:
            alive[act[rem > 1e-15 * h_full]] = False  # unresolved: Zeno-like
        if wrap:
            p = sys.box.wrap(p)
        bad = ~np.isfinite(p).all(axis=1)
        escaped = ~sys.box.contains(p)
        alive[act[bad | escaped]] = False
        pts[act] = p
    return EnsembleCloud(points=pts, t=cloud.t + duration, seed=cloud.seed,
                         alive=alive, impacts=impacts)


def histogram(cloud: EnsembleCloud, grid: GridSpec,
              rho: Optional[Callable] = None,
              sheet_of: Optional[Callable] = None) -> DensityField:
    """Empirical density of the alive points on the grid.

    counts / (N_alive * cell volume * rho) so the result integrates to one
    over the alive points with respect to mu = rho dx.  Points outside the
    grid are dropped.  ``sheet_of(points) -> int array`` assigns sheets on
    multi-sheet grids.
    """
    pts = cloud.points[cloud.alive]
    lo, h = grid.box.lo, grid.spacing
    shape = np.asarray(grid.shape)
    idx = np.floor((pts - lo) / h).astype(int)
    ok = np.ones(len(pts), dtype=bool)
    for i in range(grid.box.dim):
        if i in grid.box.periodic_axes:
            idx[:, i] = np.mod(idx[:, i], shape[i])
        else:
            ok &= (idx[:, i] >= 0) & (idx[:, i] < shape[i])
    idx = idx[ok]
    n_alive = cloud.n_alive
    counts = np.zeros((grid.sheet_count, grid.n_nodes))
    flat = np.ravel_multi_index(idx.T, grid.shape)
    if grid.sheet_count == 1:
        np.add.at(counts[0], flat, 1.0)
    else:
        if sheet_of is None:
            raise ValueError("multi-sheet histogram needs sheet_of")
        sheets = np.asarray(sheet_of(pts[ok]), dtype=int)
        np.add.at(counts, (sheets, flat), 1.0)
    vals = counts / (max(n_alive, 1) * grid.cell_volume)
    if rho is not None:
        nodes = grid_nodes(grid)
        if grid.sheet_count == 1:
            vals = vals / np.asarray(rho(nodes), dtype=float)[None, :]
        else:
            for s in range(grid.sheet_count):
                vals[s] /= np.asarray(rho(nodes, np.full(len(nodes), s)), dtype=float)
    shape_out = grid.shape if grid.sheet_count == 1 \
        else (grid.sheet_count,) + tuple(grid.shape)
    out = DensityField(grid=grid, t=cloud.t, values=vals.reshape(shape_out))
    out.mass = out.compute_mass()
    return out


@dataclass
class CompareResult:
    l1: float
    linf: float
    mass_a: float
    mass_b: float


def compare(a: DensityField, b: DensityField) -> CompareResult:
    """L1 and Linf distance between mass-normalized fields on one grid."""
    if a.grid != b.grid:
        raise GridMismatchError("density fields live on different grids")
    ma = a.compute_mass()
    mb = b.compute_mass()
    ua = a.values_sheeted / (ma if ma != 0 else 1.0)
    ub = b.values_sheeted / (mb if mb != 0 else 1.0)
    diff = np.abs(ua - ub)
    return CompareResult(
        l1=float(diff.sum() * a.grid.cell_volume),
        linf=float(diff.max()),
        mass_a=ma, mass_b=mb,
    )
