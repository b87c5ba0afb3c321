"""Hybrid-system primitives: domain boxes, the system tuple, guard queries.

A hybrid system couples a smooth vector field X on a box-shaped chart with a
codimension-1 guard surface {s = 0} and a reset map applied on armed guard
hits.  Everything downstream (flow integration, volume forms, the transfer
operator solver, the Monte-Carlo oracle) consumes the evaluators collected in
:class:`HybridSystem`.

All evaluators are vectorized: a point argument has shape ``(..., n)`` and
scalar-valued evaluators return shape ``(...,)``.  Systems are immutable after
construction and every evaluator must be pure, so they are safe to call from
any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "HybridError",
    "NonFiniteError",
    "TangentFlowError",
    "DegenerateGuardError",
    "SingularFrameError",
    "NoBracketError",
    "GridMismatchError",
    "SamplingStallError",
    "InfinitePreimageError",
    "PreimageError",
    "DomainError",
    "ZenoError",
    "DomainBox",
    "HybridSystem",
    "eval_guard",
    "decompose_tangent",
    "guard_gradient",
]

# Relative transversality floor for the flow/guard decomposition.
TRANSVERSALITY_TOL = 1e-12


class HybridError(Exception):
    """Base class for all errors raised by this package."""


class NonFiniteError(HybridError):
    """A NaN or Inf appeared where a finite value is required."""


class TangentFlowError(HybridError):
    """Vector field is (numerically) tangent to the guard; decomposition singular."""


class DegenerateGuardError(HybridError):
    """Guard gradient vanishes at the query point."""


class SingularFrameError(HybridError):
    """Assembled frame matrix is singular; no Jacobian can be formed."""


class NoBracketError(HybridError):
    """Crossing location requested without a sign change bracket."""


class GridMismatchError(HybridError):
    """Two density fields live on different grids."""


class SamplingStallError(HybridError):
    """Rejection sampling acceptance rate collapsed."""


class InfinitePreimageError(HybridError):
    """The preimage enumerator signalled an unbounded preimage set."""


class PreimageError(HybridError):
    """A unique preimage was required but zero or several exist."""


class DomainError(HybridError):
    """State outside the model's admissible domain."""


class ZenoError(HybridError):
    """Too many jumps inside a single solver step."""


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    return pts


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned computational chart, with optional periodic axes.

    Periodic axes identify ``lower[i]`` with ``upper[i]`` (angle coordinates).
    Stored as tuples so the box is hashable and safely immutable.
    """

    lower: tuple
    upper: tuple
    periodic_axes: frozenset = frozenset()

    def __post_init__(self):
        lo, hi = self.lo, self.hi
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower/upper must be 1-d and of equal length")
        if not np.all(lo < hi):
            raise ValueError("need lower[i] < upper[i] componentwise")
        if any(i < 0 or i >= len(lo) for i in self.periodic_axes):
            raise ValueError("periodic axis index out of range")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def wrap(self, pts) -> np.ndarray:
        """Map periodic coordinates back into [lower, upper)."""
        pts = np.array(pts, dtype=float, copy=True)
        lo, ext = self.lo, self.extent
        for i in self.periodic_axes:
            pts[..., i] = lo[i] + np.mod(pts[..., i] - lo[i], ext[i])
        return pts

    def contains(self, pts) -> np.ndarray:
        """True where all non-periodic coordinates lie inside the box."""
        pts = _as_points(pts)
        ok = np.ones(pts.shape[:-1], dtype=bool)
        for i in range(self.dim):
            if i in self.periodic_axes:
                continue
            ok &= (pts[..., i] >= self.lo[i]) & (pts[..., i] <= self.hi[i])
        return ok

    @staticmethod
    def make(lower: Sequence[float], upper: Sequence[float],
             periodic_axes: Sequence[int] = ()) -> "DomainBox":
        return DomainBox(tuple(float(v) for v in lower),
                         tuple(float(v) for v in upper),
                         frozenset(int(i) for i in periodic_axes))


def _true_like(pts, *args):
    pts = _as_points(pts)
    return np.ones(pts.shape[:-1], dtype=bool)


def _ones_like(pts, *args):
    pts = _as_points(pts)
    return np.ones(pts.shape[:-1], dtype=float)


@dataclass(frozen=True)
class HybridSystem:
    """The hybrid tuple: chart box, vector field, guard, reset, reference density.

    Required evaluators
    -------------------
    vector_field(x)   -> tangent vector(s)
    guard_level(x)    -> s(x); the guard is {s = 0, armed}
    guard_armed(x)    -> bool; True where a zero crossing triggers the reset
    reset(x)          -> post-impact point (defined smoothly near the guard)
    image_level(x)    -> s_img(x), vanishing exactly on the reset image
    preimages(y)      -> finite list of guard points mapping onto y

    Optional evaluators refine geometry or speed:

    * ``image_armed`` restricts the image set the same way arming restricts
      the guard (backward crossings of the image trigger density jumps).
    * ``vector_field_pre`` / ``vector_field_post`` give one-sided limits of a
      discontinuous field on the guard / image side; they default to
      ``vector_field`` and only matter for Jacobian frames.
    * ``reset_jacobian(x, v)`` is the analytic differential of the reset;
      central differences are used when absent.
    * ``jacobian_analytic(x)`` supplies a closed-form hybrid Jacobian.
    * ``jump_weight(z)`` is the divisor applied to density weights when a
      backward characteristic branches through z; defaults to the hybrid
      Jacobian at z.
    * ``preimage_map(y)`` is a vectorized single-preimage inverse.
    * ``guard_gradient(x)`` / ``image_gradient(x)`` analytic gradients.
    * ``divergence(x)`` analytic div_mu(X); numeric fallback exists.
    * ``transparent_images`` marks reset images the continuous flow also
      passes through (the guard at those points is unarmed), so the density
      past the image is the through-transport plus the jump sum.

    ``sheets > 1`` marks a multi-branch state space; every evaluator then
    takes an extra integer sheet argument, and a reset returns a
    ``(point, sheet)`` pair.  Only the transfer solver consumes sheeted
    systems directly; other modules work on a companion single-chart model.
    """

    dim: int
    box: DomainBox
    vector_field: Callable
    guard_level: Callable
    guard_armed: Callable
    reset: Callable
    image_level: Callable
    preimages: Callable
    image_armed: Callable = _true_like
    ref_density: Callable = _ones_like
    divergence: Optional[Callable] = None
    vector_field_pre: Optional[Callable] = None
    vector_field_post: Optional[Callable] = None
    reset_jacobian: Optional[Callable] = None
    jacobian_analytic: Optional[Callable] = None
    jump_weight: Optional[Callable] = None
    preimage_map: Optional[Callable] = None
    guard_gradient: Optional[Callable] = None
    image_gradient: Optional[Callable] = None
    self_imaged: bool = False
    transparent_images: bool = False
    sheets: int = 1
    name: str = ""
    params: dict = field(default_factory=dict)

    def field_pre(self, x):
        f = self.vector_field_pre or self.vector_field
        return f(x)

    def field_post(self, x):
        f = self.vector_field_post or self.vector_field
        return f(x)

    def rho(self, x):
        return self.ref_density(x)


def guard_gradient(sys: HybridSystem, x, *, image: bool = False) -> np.ndarray:
    """Gradient of the guard (or image) level function at one point.

    Uses the analytic callback when the model provides one, otherwise central
    differences with a step of 1e-6 times the per-axis box extent.
    """
    analytic = sys.image_gradient if image else sys.guard_gradient
    if analytic is not None:
        return np.asarray(analytic(x), dtype=float)
    level = sys.image_level if image else sys.guard_level
    x = _as_points(x)
    h = 1e-6 * sys.box.extent
    g = np.empty(sys.dim)
    for i in range(sys.dim):
        e = np.zeros(sys.dim)
        e[i] = h[i]
        g[i] = (float(level(x + e)) - float(level(x - e))) / (2.0 * h[i])
    return g


def eval_guard(sys: HybridSystem, x) -> tuple[float, bool]:
    """Guard level and arming flag at a single state.

    Returns ``(s(x), armed)``; ``armed`` means a zero crossing at this state
    triggers the reset.  Pure and deterministic.
    """
    x = _as_points(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite state {x!r}")
    level = float(sys.guard_level(x))
    if not np.isfinite(level):
        raise NonFiniteError(f"guard level not finite at {x!r}")
    return level, bool(sys.guard_armed(x))


def decompose_tangent(sys: HybridSystem, x_on_guard, v) -> tuple[np.ndarray, float]:
    """Split v at a guard point into a guard-tangent part and a flow multiple.

    Returns ``(tangential, flow_coeff)`` with
    ``v = tangential + flow_coeff * X(x)`` and ``ds(tangential) = 0``.
    The field value on the guard is the source-side limit ``field_pre``.

    Raises :class:`TangentFlowError` when X is numerically tangent to the
    guard, which makes the decomposition singular.
    """
    x = _as_points(x_on_guard)
    v = _as_points(v)
    g = guard_gradient(sys, x)
    X = np.asarray(sys.field_pre(x), dtype=float)
    denom = float(g @ X)
    scale = float(np.linalg.norm(g) * np.linalg.norm(X))
    if abs(denom) <= TRANSVERSALITY_TOL * max(scale, 1e-300):
        raise TangentFlowError(
            f"field tangent to guard at {x!r}: ds(X) = {denom:g}")
    coeff = float(g @ v) / denom
    tangential = v - coeff * X
    return tangential, coeff
