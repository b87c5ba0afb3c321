"""Event-detected integration of hybrid flows.

Fixed-step RK4 between guard crossings, bisection on re-integrated sub-steps
to locate impacts, reset application with a small forward nudge to leave the
guard neighbourhood, and Zeno / domain-exit safeguards.  Fixed stepping keeps
runs bit-reproducible and gives cheap dense output for event location.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import (
    DomainBox,
    HybridSystem,
    NoBracketError,
    NonFiniteError,
    PreimageError,
)

__all__ = [
    "IntegratorConfig",
    "Termination",
    "ImpactEvent",
    "HybridTrajectory",
    "integrate",
    "integrate_backward",
    "locate_crossing",
]


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step integrator knobs.

    post_reset_nudge is a time increment along X applied after each reset so
    the state leaves the guard neighbourhood before monitoring resumes; with
    the arming predicate it suppresses immediate re-triggering (beating).

    min_interevent_time of None resolves to 4 * dt_max: flight arcs shorter
    than a step cannot be resolved by sign monitoring, so an accumulation is
    declared Zeno while the inter-event gaps are still a few steps wide.
    """

    dt_max: float = 1e-3
    rk_order: int = 4
    impact_tol: float = 1e-10
    max_impacts: int = 1000
    min_interevent_time: Optional[float] = None
    post_reset_nudge: float = 1e-9
    record_stride: int = 1

    def __post_init__(self):
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")
        if self.rk_order != 4:
            raise ValueError("only rk_order=4 is implemented")
        if self.impact_tol <= 0:
            raise ValueError("impact_tol must be positive")
        if self.max_impacts < 1:
            raise ValueError("max_impacts must be >= 1")

    @property
    def min_interevent(self) -> float:
        if self.min_interevent_time is None:
            return 4.0 * self.dt_max
        return self.min_interevent_time


class Termination(enum.Enum):
    TIME_REACHED = "TimeReached"
    ZENO_LIMIT = "ZenoLimit"
    LEFT_DOMAIN = "LeftDomain"
    NON_FINITE = "NonFinite"


@dataclass
class ImpactEvent:
    t: float
    x_pre: np.ndarray
    x_post: np.ndarray


@dataclass
class HybridTrajectory:
    """Piecewise-smooth path with tagged impact events."""

    times: np.ndarray
    states: np.ndarray
    events: List[ImpactEvent]
    terminated: Termination

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t: float) -> np.ndarray:
        """Piecewise-linear sample of the recorded path."""
        return np.array([np.interp(t, self.times, self.states[:, i])
                         for i in range(self.states.shape[1])])

    @property
    def impact_times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])


def _rk4_step(f: Callable, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + (0.5 * h) * k1)
    k3 = f(x + (0.5 * h) * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def locate_crossing(sys: HybridSystem, x_before, x_after, t_before: float,
                    t_after: float, impact_tol: float,
                    *, level: Optional[Callable] = None,
                    vector_field: Optional[Callable] = None):
    """Bisect a bracketed guard crossing down to |s| < impact_tol.

    The candidate states are produced by re-integrating the bracketing RK4
    step with shrinking fractions, i.e. dense output by sub-step
    re-integration.  Returns ``(t_hit, x_hit)``.
    """
    level = level or sys.guard_level
    f = vector_field or sys.vector_field
    x0 = np.asarray(x_before, dtype=float)
    s_lo = float(level(x0))
    s_hi = float(level(np.asarray(x_after, dtype=float)))
    if s_lo == 0.0:
        return t_before, x0
    if s_lo * s_hi > 0.0:
        raise NoBracketError(
            f"no sign change: s({t_before})={s_lo:g}, s({t_after})={s_hi:g}")
    h = t_after - t_before
    f_lo, f_hi = 0.0, 1.0
    x_mid = np.asarray(x_after, dtype=float)
    for _ in range(80):
        f_mid = 0.5 * (f_lo + f_hi)
        x_mid = _rk4_step(f, x0, f_mid * h)
        s_mid = float(level(x_mid))
        if abs(s_mid) < impact_tol or (f_hi - f_lo) < 1e-16:
            return t_before + f_mid * h, x_mid
        if s_lo * s_mid <= 0.0:
            f_hi = f_mid
        else:
            f_lo = f_mid
    return t_before + 0.5 * (f_lo + f_hi) * h, x_mid


def _rk4_step_flat(f: Callable, x: tuple, h: float) -> tuple:
    k1 = f(x)
    x2 = tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k1))
    k2 = f(x2)
    x3 = tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k2))
    k3 = f(x3)
    x4 = tuple(xi + h * ki for xi, ki in zip(x, k3))
    k4 = f(x4)
    c = h / 6.0
    return tuple(xi + c * (a + 2.0 * b + 2.0 * d + e)
                 for xi, a, b, d, e in zip(x, k1, k2, k3, k4))


def _integrate_fast(sys: HybridSystem, x0: np.ndarray, t0: float, t1: float,
                    cfg: IntegratorConfig) -> HybridTrajectory:
    """Plain-float twin of :func:`integrate` for models exposing scalar
    callables (params field_flat/guard_flat/armed_flat/reset_flat); used for
    long fixed-step runs where per-step numpy overhead dominates."""
    import math

    p = sys.params
    f, s_of = p["field_flat"], p["guard_flat"]
    armed_of, reset_of = p["armed_flat"], p["reset_flat"]
    lo, hi = sys.box.lower, sys.box.upper
    x = tuple(float(v) for v in x0)
    t = t0
    times = [t0]
    states = [x]
    events: List[ImpactEvent] = []
    term = Termination.TIME_REACHED
    last_event_t = None
    s_cur = s_of(x)
    step_i = 0
    eps_end = 1e-15 * max(1.0, abs(t1))

    while t < t1 - eps_end:
        h = cfg.dt_max if t + cfg.dt_max <= t1 else t1 - t
        x_new = _rk4_step_flat(f, x, h)
        if not all(math.isfinite(v) for v in x_new):
            term = Termination.NON_FINITE
            break
        s_new = s_of(x_new)

        if s_cur * s_new < 0.0:
            f_lo, f_hi = 0.0, 1.0
            x_hit, t_frac = x_new, 1.0
            for _ in range(80):
                f_mid = 0.5 * (f_lo + f_hi)
                x_hit = _rk4_step_flat(f, x, f_mid * h)
                s_mid = s_of(x_hit)
                t_frac = f_mid
                if abs(s_mid) < cfg.impact_tol or (f_hi - f_lo) < 1e-16:
                    break
                if s_cur * s_mid <= 0.0:
                    f_hi = f_mid
                else:
                    f_lo = f_mid
            t_hit = t + t_frac * h
            if armed_of(x_hit):
                x_post = reset_of(x_hit)
                events.append(ImpactEvent(t_hit, np.asarray(x_hit),
                                          np.asarray(x_post)))
                if len(events) > cfg.max_impacts or (
                        last_event_t is not None
                        and t_hit - last_event_t < cfg.min_interevent):
                    term = Termination.ZENO_LIMIT
                    t = t_hit
                    times.append(t)
                    states.append(x_hit)
                    break
                last_event_t = t_hit
                k = f(x_post)
                x = tuple(xi + cfg.post_reset_nudge * ki
                          for xi, ki in zip(x_post, k))
                t = t_hit + cfg.post_reset_nudge
                times.append(t)
                states.append(x)
                s_cur = s_of(x)
                continue

        t += h
        x = x_new
        s_cur = s_new
        step_i += 1
        if step_i % cfg.record_stride == 0 or t >= t1 - eps_end:
            times.append(t)
            states.append(x)
        inside = True
        for v, a, b in zip(x, lo, hi):
            if v < a or v > b:
                inside = False
                break
        if not inside:
            term = Termination.LEFT_DOMAIN
            break

    if times[-1] != t:
        times.append(t)
        states.append(x)
    return HybridTrajectory(np.asarray(times), np.asarray(states, dtype=float),
                            events, term)


def integrate(sys: HybridSystem, x0, t0: float, t1: float,
              cfg: IntegratorConfig) -> HybridTrajectory:
    """Hybrid flow from t0 to t1 with event detection.

    Smooth RK4 stepping; a sign change of the guard level brackets a
    crossing, bisection locates it, the reset applies where armed, and the
    state is nudged forward along X before stepping resumes.  Early
    termination reasons: Zeno (impact count or inter-event time),
    domain exit on a non-periodic axis, or a non-finite state.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0; use integrate_backward")
    x = sys.box.wrap(np.asarray(x0, dtype=float))
    if x.shape != (sys.dim,):
        raise ValueError(f"x0 must have dimension {sys.dim}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite initial state")
    if (not sys.box.periodic_axes
            and {"field_flat", "guard_flat", "armed_flat", "reset_flat"}
            <= sys.params.keys()):
        return _integrate_fast(sys, x, t0, t1, cfg)

    f = sys.vector_field
    wrap_axes = sys.box.periodic_axes
    times = [t0]
    states = [x.copy()]
    events: List[ImpactEvent] = []
    term = Termination.TIME_REACHED
    t = t0
    last_event_t = None
    s_cur = float(sys.guard_level(x))
    step_i = 0

    while t < t1 - 1e-15 * max(1.0, abs(t1)):
        h = min(cfg.dt_max, t1 - t)
        x_new = _rk4_step(f, x, h)
        if not np.all(np.isfinite(x_new)):
            term = Termination.NON_FINITE
            break
        s_new = float(sys.guard_level(x_new))

        if s_cur * s_new < 0.0:
            t_hit, x_hit = locate_crossing(sys, x, x_new, t, t + h,
                                           cfg.impact_tol)
            if bool(sys.guard_armed(x_hit)):
                x_post = np.asarray(sys.reset(x_hit), dtype=float)
                events.append(ImpactEvent(t_hit, x_hit.copy(), x_post.copy()))
                if len(events) > cfg.max_impacts or (
                        last_event_t is not None
                        and t_hit - last_event_t < cfg.min_interevent):
                    term = Termination.ZENO_LIMIT
                    t = t_hit
                    times.append(t)
                    states.append(x_hit)
                    break
                last_event_t = t_hit
                x = x_post + cfg.post_reset_nudge * np.asarray(f(x_post), dtype=float)
                t = t_hit + cfg.post_reset_nudge
                if wrap_axes:
                    x = sys.box.wrap(x)
                times.append(t)
                states.append(x.copy())
                s_cur = float(sys.guard_level(x))
                continue

        t += h
        x = sys.box.wrap(x_new) if wrap_axes else x_new
        s_cur = s_new if not wrap_axes else float(sys.guard_level(x))
        step_i += 1
        if step_i % cfg.record_stride == 0 or t >= t1 - 1e-15:
            times.append(t)
            states.append(x.copy())
        if not bool(sys.box.contains(x)):
            term = Termination.LEFT_DOMAIN
            break

    if times[-1] != t:
        times.append(t)
        states.append(x.copy())
    return HybridTrajectory(np.asarray(times), np.asarray(states), events, term)


def _reversed_system(sys: HybridSystem) -> HybridSystem:
    """Time-reversed system: resets replaced by unique-preimage selection."""

    def back_field(x):
        return -np.asarray(sys.vector_field(x), dtype=float)

    def back_reset(x):
        pres = sys.preimages(x)
        if len(pres) != 1:
            raise PreimageError(
                f"backward integration needs a unique preimage, got {len(pres)}")
        return np.asarray(pres[0], dtype=float)

    def back_preimages(y):
        return [np.asarray(sys.reset(y), dtype=float)]

    params = {k: v for k, v in sys.params.items()
              if not k.endswith("_flat")}  # scalar fast path is forward-only
    return HybridSystem(
        dim=sys.dim,
        box=sys.box,
        vector_field=back_field,
        guard_level=sys.image_level,
        guard_armed=sys.image_armed,
        reset=back_reset,
        image_level=sys.guard_level,
        image_armed=sys.guard_armed,
        preimages=back_preimages,
        ref_density=sys.ref_density,
        name=sys.name + ":reversed",
        params=params,
    )


def integrate_backward(sys: HybridSystem, x0, t0: float, t1: float,
                       cfg: IntegratorConfig) -> HybridTrajectory:
    """Hybrid flow backward from t0 down to t1 < t0.

    Same contract as :func:`integrate` with time reversed; crossings of the
    reset image teleport to the unique preimage.  Multi-preimage crossings
    raise :class:`PreimageError`; the transfer module handles the general
    weighted sum instead.
    """
    if t1 > t0:
        raise ValueError("backward integration needs t1 < t0")
    rev = _reversed_system(sys)
    traj = integrate(rev, x0, 0.0, t0 - t1, cfg)
    times = t0 - traj.times
    events = [ImpactEvent(t0 - e.t, e.x_pre, e.x_post) for e in traj.events]
    return HybridTrajectory(times, traj.states, events, traj.terminated)
