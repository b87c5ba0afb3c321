"""Built-in hybrid systems: bouncing ball, Filippov plane, Chaplygin sleigh
(3D reduced and 2D energy-reduced two-sheet), the GL2 reduced matrix system,
the scalar (q, C) impact system, plus the full-coordinate companions used to
cross-check the reductions.

Every evaluator is vectorized over leading axes.  Model ids registered for
the CLI: ball, ball-inelastic, filippov, chaplygin3d, chaplygin2d, gl2, qc.
"""

from __future__ import annotations

import numpy as np

from .core import DomainBox, DomainError, HybridSystem

__all__ = [
    "MODEL_IDS",
    "make",
    "make_bouncing_ball",
    "make_filippov",
    "filippov_invariant_density",
    "make_chaplygin3d",
    "make_chaplygin2d",
    "make_gl2_model",
    "make_gl2_full",
    "make_qc_system",
    "make_chaplygin_full",
    "make_aff1_full",
    "make_aff1_reduced",
    "initial_density",
]

MODEL_IDS = ("ball", "ball-inelastic", "filippov", "chaplygin3d",
             "chaplygin2d", "gl2", "qc")


def _const(value):
    def f(pts, *args):
        pts = np.asarray(pts, dtype=float)
        return np.full(pts.shape[:-1], value)
    return f


# ---------------------------------------------------------------------------
# bouncing ball
# ---------------------------------------------------------------------------

def make_bouncing_ball(m: float = 1.0, g: float = 1.0, c: float = 1.0,
                       box: DomainBox | None = None) -> HybridSystem:
    """Ball under gravity, impact at x = 0.

    The impact map scales momentum by -c^2 (elastic for c = 1), the unique
    energy-behaved map interpolating restitution on a flat guard; its hybrid
    Jacobian is c^4.
    """
    if m <= 0 or g <= 0 or not (0 < c <= 1):
        raise DomainError("need m > 0, g > 0 and 0 < c <= 1")
    r = c * c
    box = box or DomainBox.make([-1e-6, -3.0], [4.0, 3.0])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack([pts[..., 1] / m,
                         np.full(pts.shape[:-1], -m * g)], axis=-1)

    def level(pts):
        return np.asarray(pts, dtype=float)[..., 0]

    def armed(pts):
        return np.asarray(pts, dtype=float)[..., 1] < 0

    def image_armed(pts):
        return np.asarray(pts, dtype=float)[..., 1] > 0

    def reset(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 1] *= -r
        return out

    def reset_jacobian(x, v):
        out = np.array(v, dtype=float, copy=True)
        out[..., 1] *= -r
        return out

    def preimage_map(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 1] /= -r
        return out

    def energy(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 1] ** 2 / (2 * m) + m * g * pts[..., 0]

    def sample_guard(n, rng):
        p = rng.uniform(-2.5, -0.1, size=n)
        return np.stack([np.zeros(n), p], axis=-1)

    mg = m * g

    return HybridSystem(
        dim=2, box=box,
        vector_field=field,
        guard_level=level, guard_armed=armed,
        reset=reset, image_level=level, image_armed=image_armed,
        preimages=lambda y: [preimage_map(np.asarray(y, dtype=float))],
        preimage_map=preimage_map,
        reset_jacobian=reset_jacobian,
        divergence=_const(0.0),
        jacobian_analytic=None,
        jump_weight=_const(r * r),
        guard_gradient=lambda x: np.array([1.0, 0.0]),
        image_gradient=lambda x: np.array([1.0, 0.0]),
        name="ball" if c == 1.0 else "ball-inelastic",
        params={"m": m, "g": g, "c": c, "jacobian": r * r,
                "energy": energy, "sample_guard": sample_guard,
                "field_flat": lambda x: (x[1] / m, -mg),
                "guard_flat": lambda x: x[0],
                "armed_flat": lambda x: x[1] < 0.0,
                "reset_flat": lambda x: (x[0], -r * x[1])},
    )


# ---------------------------------------------------------------------------
# Filippov plane with guard xy = 0
# ---------------------------------------------------------------------------

def _fil_branches(alpha):
    def pos(pts):  # branch valid on xy > 0
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([y / alpha - x, -(alpha * x + y)], axis=-1)

    def neg(pts):  # branch valid on xy < 0
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([alpha * y - x, -(y + x / alpha)], axis=-1)

    return pos, neg


def make_filippov(alpha: float = 2.0, box: DomainBox | None = None) -> HybridSystem:
    """Discontinuous planar spiral with guard {xy = 0} and identity reset.

    The field switches branch by the sign of xy.  On the guard, the source
    side takes the branch defined across the axis being crossed (the xy < 0
    form on the x-axis, the xy > 0 form on the y-axis) and the image side the
    other; the resulting frame determinant ratio is alpha^2 at every guard
    point.  The density jump weight applied by the transfer solver is alpha,
    the one-sided flux ratio consistent with the quadrant-extended invariant
    profile; see the README notes on this model.
    """
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    box = box or DomainBox.make([-2.0, -2.0], [2.0, 2.0])
    pos, neg = _fil_branches(alpha)

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        xy = pts[..., 0] * pts[..., 1]
        return np.where((xy >= 0)[..., None], pos(pts), neg(pts))

    def field_pre(pts):
        pts = np.asarray(pts, dtype=float)
        on_x_axis = np.abs(pts[..., 1]) <= np.abs(pts[..., 0])
        return np.where(on_x_axis[..., None], neg(pts), pos(pts))

    def field_post(pts):
        pts = np.asarray(pts, dtype=float)
        on_x_axis = np.abs(pts[..., 1]) <= np.abs(pts[..., 0])
        return np.where(on_x_axis[..., None], pos(pts), neg(pts))

    def level(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 0] * pts[..., 1]

    def identity(pts):
        return np.array(pts, dtype=float, copy=True)

    def sample_guard(n, rng):
        coord = rng.uniform(0.2, 1.8, size=n) * rng.choice([-1.0, 1.0], size=n)
        axis = rng.integers(0, 2, size=n)
        pts = np.zeros((n, 2))
        pts[np.arange(n), axis] = coord
        return pts

    return HybridSystem(
        dim=2, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=identity, image_level=level,
        preimages=lambda y: [np.asarray(y, dtype=float)],
        preimage_map=identity,
        reset_jacobian=lambda x, v: np.array(v, dtype=float, copy=True),
        divergence=_const(-2.0),
        vector_field_pre=field_pre,
        vector_field_post=field_post,
        jacobian_analytic=lambda x: alpha ** 2,
        jump_weight=_const(alpha),
        guard_gradient=lambda x: np.array([x[1], x[0]], dtype=float),
        image_gradient=lambda x: np.array([x[1], x[0]], dtype=float),
        self_imaged=True,
        name="filippov",
        params={"alpha": alpha, "jacobian": alpha ** 2,
                "sample_guard": sample_guard},
    )


def _true_like_bool(pts, *args):
    pts = np.asarray(pts, dtype=float)
    return np.ones(pts.shape[:-1], dtype=bool)


def filippov_invariant_density(alpha: float):
    """Stationary angular profile of the Filippov system, quadrant-extended.

    Each quadrant carries exp(2 tau) with tan(tau) ranging over the in-flow
    angle of that quadrant; adjacent quadrants are copies rotated by 90
    degrees, so the profile jumps by exp(pi) across each axis when
    alpha = exp(pi).
    """

    def rho(pts):
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        X = np.where(x > 0, np.where(y > 0, x, -y), np.where(y > 0, y, -x))
        Y = np.where(x > 0, np.where(y > 0, y, x), np.where(y > 0, -x, -y))
        return np.exp(2.0 * np.arctan2(alpha * X, Y))

    return rho


# ---------------------------------------------------------------------------
# Chaplygin sleigh, 3D reduced (v, omega, theta)
# ---------------------------------------------------------------------------

def make_chaplygin3d(m: float = 1.0, a: float = 0.5, inertia: float = 1.0,
                     theta0: float = np.pi / 4,
                     box: DomainBox | None = None) -> HybridSystem:
    """Reduced sleigh with angle impacts at |theta| = theta0 flipping omega."""
    if min(m, a, inertia) <= 0 or not (0 < theta0 < np.pi):
        raise DomainError("need positive m, a, I and theta0 in (0, pi)")
    k = m * a / (inertia + m * a * a)
    box = box or DomainBox.make([-3.0, -3.0, -np.pi], [3.0, 3.0, np.pi],
                                periodic_axes=[2])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        v, w = pts[..., 0], pts[..., 1]
        return np.stack([a * w * w, -k * v * w, w], axis=-1)

    def level(pts):
        th = np.asarray(pts, dtype=float)[..., 2]
        return th * th - theta0 * theta0

    def armed(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 1] * pts[..., 2] > 0

    def image_armed(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 1] * pts[..., 2] < 0

    def reset(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 1] *= -1.0
        return out

    def divergence(pts):
        return -k * np.asarray(pts, dtype=float)[..., 0]

    def energy(pts):
        pts = np.asarray(pts, dtype=float)
        return 0.5 * m * pts[..., 0] ** 2 + 0.5 * (inertia + m * a * a) * pts[..., 1] ** 2

    def sample_guard(n, rng):
        v = rng.uniform(-2, 2, size=n)
        w = rng.uniform(0.1, 2, size=n)
        side = rng.choice([-1.0, 1.0], size=n)
        return np.stack([v, w * side, theta0 * side], axis=-1)

    return HybridSystem(
        dim=3, box=box,
        vector_field=field,
        guard_level=level, guard_armed=armed,
        reset=reset, image_level=level, image_armed=image_armed,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        reset_jacobian=lambda x, v: reset(v),
        divergence=divergence,
        jump_weight=_const(1.0),
        guard_gradient=lambda x: np.array([0.0, 0.0, 2.0 * x[2]]),
        image_gradient=lambda x: np.array([0.0, 0.0, 2.0 * x[2]]),
        name="chaplygin3d",
        params={"m": m, "a": a, "I": inertia, "theta0": theta0,
                "energy": energy, "sample_guard": sample_guard},
    )


# ---------------------------------------------------------------------------
# Chaplygin sleigh on an energy level: two-sheet (v, theta) system
# ---------------------------------------------------------------------------

def _wrapdiff(th, center):
    return np.mod(th - center + np.pi, 2.0 * np.pi) - np.pi


def make_chaplygin2d(m: float = 1.0, a: float = 0.5, inertia: float = 1.0,
                     theta0: float = np.pi / 4, energy: float = 1.0) -> HybridSystem:
    """Energy-restricted sleigh on two sheets carrying the sign of omega.

    Sheet 0 rotates with omega = +sqrt(C1 - C2 v^2), sheet 1 with the minus
    branch; hitting the sheet's guard angle swaps sheets, leaving (v, theta)
    fixed.  All evaluators take (points, sheet) pairs.
    """
    if energy <= 0:
        raise DomainError("energy must be positive")
    if min(m, a, inertia) <= 0 or not (0 < theta0 < np.pi):
        raise DomainError("need positive m, a, I and theta0 in (0, pi)")
    c1 = 2.0 * energy / (inertia + m * a * a)
    c2 = m / (inertia + m * a * a)
    vstar = np.sqrt(c1 / c2)
    box = DomainBox.make([-vstar, -np.pi], [vstar, np.pi], periodic_axes=[1])

    def omega(pts, sheet):
        v = np.asarray(pts, dtype=float)[..., 0]
        mag = np.sqrt(np.maximum(c1 - c2 * v * v, 0.0))
        return np.where(np.asarray(sheet) == 0, mag, -mag)

    def field(pts, sheet):
        pts = np.asarray(pts, dtype=float)
        v = pts[..., 0]
        return np.stack([a * (c1 - c2 * v * v), omega(pts, sheet)], axis=-1)

    # smooth periodic level functions: sin(theta - center) has a genuine
    # zero at the line and an antipodal one that stays unarmed, which keeps
    # every level value free of wrap seams
    def level(pts, sheet):
        th = np.asarray(pts, dtype=float)[..., 1]
        center = np.where(np.asarray(sheet) == 0, theta0, -theta0)
        return np.sin(th - center)

    def image_level(pts, sheet):
        th = np.asarray(pts, dtype=float)[..., 1]
        center = np.where(np.asarray(sheet) == 0, -theta0, theta0)
        return np.sin(th - center)

    def armed(pts, sheet):
        th = np.asarray(pts, dtype=float)[..., 1]
        center = np.where(np.asarray(sheet) == 0, theta0, -theta0)
        return np.abs(_wrapdiff(th, center)) < np.pi / 2

    def image_armed(pts, sheet):
        th = np.asarray(pts, dtype=float)[..., 1]
        center = np.where(np.asarray(sheet) == 0, -theta0, theta0)
        return np.abs(_wrapdiff(th, center)) < np.pi / 2

    def reset(pts, sheet):
        return np.array(pts, dtype=float, copy=True), 1 - np.asarray(sheet)

    def divergence(pts, sheet):
        return -2.0 * a * c2 * np.asarray(pts, dtype=float)[..., 0]

    def ref(pts, sheet):
        return np.ones(np.asarray(pts).shape[:-1], dtype=float)

    def jump_weight(pts, sheet):
        return np.ones(np.asarray(pts).shape[:-1], dtype=float)

    def lift_to_3d(pts, sheet):
        pts = np.asarray(pts, dtype=float)
        return np.stack([pts[..., 0], omega(pts, sheet), pts[..., 1]], axis=-1)

    def project_to_2d(pts3):
        pts3 = np.asarray(pts3, dtype=float)
        sheet = (pts3[..., 1] < 0).astype(int)
        return np.stack([pts3[..., 0], pts3[..., 2]], axis=-1), sheet

    return HybridSystem(
        dim=2, box=box, sheets=2,
        vector_field=field,
        guard_level=level, guard_armed=armed,
        reset=reset, image_level=image_level, image_armed=image_armed,
        preimages=lambda y: [y],
        preimage_map=reset,
        divergence=divergence,
        ref_density=ref,
        jump_weight=jump_weight,
        transparent_images=True,
        name="chaplygin2d",
        params={"m": m, "a": a, "I": inertia, "theta0": theta0, "E": energy,
                "C1": c1, "C2": c2, "vstar": vstar,
                "lift_to_3d": lift_to_3d, "project_to_2d": project_to_2d},
    )


# ---------------------------------------------------------------------------
# GL2 reduced model on (zeta1..zeta4, q)
# ---------------------------------------------------------------------------

def make_gl2_model(box: DomainBox | None = None) -> HybridSystem:
    """Coadjoint flow of h = tr(zeta zeta^T)/2 plus the coset coordinate q.

    Impacts at q = 0 apply zeta -> (-z4, z2, z3, -z1), i.e. zeta plus the
    trace jump -tr(zeta) I; tr(zeta) and z3 - z2 are conserved along the
    flow, and the published hybrid Jacobian of the jump is -1.
    """
    box = box or DomainBox.make([-6.0] * 4 + [-3.0], [6.0] * 4 + [3.0])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        z1, z2, z3, z4, q = (pts[..., i] for i in range(5))
        cross = (z1 - z4) * (z2 - z3)
        return np.stack([-z2 ** 2 + z3 ** 2, cross, cross, z2 ** 2 - z3 ** 2,
                         (q + 1.0) * (z1 + z4)], axis=-1)

    def level(pts):
        return np.asarray(pts, dtype=float)[..., 4]

    def reset(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.array(pts, copy=True)
        out[..., 0] = -pts[..., 3]
        out[..., 3] = -pts[..., 0]
        return out

    def divergence(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 0] + pts[..., 3]

    def sample_guard(n, rng):
        z = rng.uniform(-2, 2, size=(n, 4))
        bad = np.abs(z[:, 0] + z[:, 3]) < 0.2
        z[bad, 0] += 0.5
        return np.concatenate([z, np.zeros((n, 1))], axis=1)

    return HybridSystem(
        dim=5, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=reset, image_level=level,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        reset_jacobian=lambda x, v: reset(v),
        divergence=divergence,
        jacobian_analytic=lambda x: -1.0,
        jump_weight=_const(-1.0),
        guard_gradient=lambda x: np.array([0.0, 0.0, 0.0, 0.0, 1.0]),
        image_gradient=lambda x: np.array([0.0, 0.0, 0.0, 0.0, 1.0]),
        self_imaged=True,
        name="gl2",
        params={"sample_guard": sample_guard},
    )


def make_gl2_full(box: DomainBox | None = None) -> HybridSystem:
    """Full 8D system on (A, P) with H = tr(A^T P P^T A)/2, impacts at det A = 1.

    The momentum map to the reduced chart is zeta = A^T P, q = det(A) - 1.
    """
    box = box or DomainBox.make([-8.0] * 8, [8.0] * 8)

    def unpack(pts):
        pts = np.asarray(pts, dtype=float)
        A = pts[..., :4].reshape(pts.shape[:-1] + (2, 2))
        P = pts[..., 4:].reshape(pts.shape[:-1] + (2, 2))
        return A, P

    def field(pts):
        A, P = unpack(pts)
        Adot = np.einsum("...ij,...kj,...kl->...il", A, A, P)
        Pdot = -np.einsum("...ij,...kj,...kl->...il", P, P, A)
        return np.concatenate([Adot.reshape(Adot.shape[:-2] + (4,)),
                               Pdot.reshape(Pdot.shape[:-2] + (4,))], axis=-1)

    def det_a(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 0] * pts[..., 3] - pts[..., 1] * pts[..., 2]

    def level(pts):
        return det_a(pts) - 1.0

    def cof(A):
        out = np.empty_like(A)
        out[..., 0, 0] = A[..., 1, 1]
        out[..., 0, 1] = -A[..., 1, 0]
        out[..., 1, 0] = -A[..., 0, 1]
        out[..., 1, 1] = A[..., 0, 0]
        return out

    def reset(pts):
        A, P = unpack(pts)
        ds = cof(A)
        grad = np.einsum("...ij,...kj,...kl->...il", A, A, ds)
        num = np.einsum("...ij,...ij->...", P, grad)
        den = np.einsum("...ij,...ij->...", ds, grad)
        Pnew = P - (2.0 * num / den)[..., None, None] * ds
        out = np.array(pts, dtype=float, copy=True)
        out[..., 4:] = Pnew.reshape(Pnew.shape[:-2] + (4,))
        return out

    def momentum_map(pts):
        A, P = unpack(pts)
        zeta = np.einsum("...ji,...jk->...ik", A, P)
        return np.concatenate([zeta.reshape(zeta.shape[:-2] + (4,)),
                               (det_a(pts) - 1.0)[..., None]], axis=-1)

    return HybridSystem(
        dim=8, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=reset, image_level=level,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        self_imaged=True,
        name="gl2-full",
        params={"momentum_map": momentum_map},
    )


# ---------------------------------------------------------------------------
# scalar (q, C) impact system
# ---------------------------------------------------------------------------

def make_qc_system(box: DomainBox | None = None) -> HybridSystem:
    """The two-scalar system q' = (q+1) C with C -> -C at q = 0.

    Tracks the determinant deviation and the trace Casimir of the matrix
    model; any trajectory undergoes at most one impact.
    """
    box = box or DomainBox.make([-4.0, -4.0], [4.0, 4.0])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack([(pts[..., 0] + 1.0) * pts[..., 1],
                         np.zeros(pts.shape[:-1])], axis=-1)

    def level(pts):
        return np.asarray(pts, dtype=float)[..., 0]

    def reset(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 1] *= -1.0
        return out

    def divergence(pts):
        return np.asarray(pts, dtype=float)[..., 1]

    def sample_guard(n, rng):
        c = rng.uniform(0.3, 3.0, size=n) * rng.choice([-1.0, 1.0], size=n)
        return np.stack([np.zeros(n), c], axis=-1)

    return HybridSystem(
        dim=2, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=reset, image_level=level,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        reset_jacobian=lambda x, v: reset(v),
        divergence=divergence,
        jump_weight=_const(1.0),
        guard_gradient=lambda x: np.array([1.0, 0.0]),
        image_gradient=lambda x: np.array([1.0, 0.0]),
        self_imaged=True,
        name="qc",
        params={"sample_guard": sample_guard,
                "field_flat": lambda x: ((x[0] + 1.0) * x[1], 0.0),
                "guard_flat": lambda x: x[0],
                "armed_flat": lambda x: True,
                "reset_flat": lambda x: (x[0], -x[1])},
    )


# ---------------------------------------------------------------------------
# full Chaplygin sleigh with the knife-edge constraint
# ---------------------------------------------------------------------------

def make_chaplygin_full(m: float = 1.0, a: float = 0.5, inertia: float = 1.0,
                        theta0: float = np.pi / 4) -> HybridSystem:
    """Sleigh in (x, y, theta, xdot, ydot, thetadot) with a multiplier solve.

    Independent of the reduced model: the Lagrange multiplier enforcing the
    knife-edge constraint is solved from the full 4x4 system each evaluation.
    Impacts at |theta| = theta0 flip thetadot.
    """
    box = DomainBox.make([-50, -50, -np.pi, -10, -10, -10],
                         [50, 50, np.pi, 10, 10, 10], periodic_axes=[2])
    big_i = inertia + m * a * a

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None]
        th = pts[:, 2]
        s, c = np.sin(th), np.cos(th)
        n = len(pts)
        A = np.zeros((n, 4, 4))
        A[:, 0, 0] = m
        A[:, 0, 2] = -m * a * s
        A[:, 0, 3] = -s
        A[:, 1, 1] = m
        A[:, 1, 2] = m * a * c
        A[:, 1, 3] = c
        A[:, 2, 0] = -m * a * s
        A[:, 2, 1] = m * a * c
        A[:, 2, 2] = big_i
        A[:, 3, 0] = s
        A[:, 3, 1] = -c
        rhs = np.zeros((n, 4))
        thd = pts[:, 5]
        rhs[:, 0] = m * a * thd * thd * c
        rhs[:, 1] = m * a * thd * thd * s
        rhs[:, 3] = -thd * (pts[:, 3] * c + pts[:, 4] * s)
        acc = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
        out = np.concatenate([pts[:, 3:6], acc[:, :3]], axis=1)
        return out[0] if single else out

    def level(pts):
        th = np.asarray(pts, dtype=float)[..., 2]
        return np.cos(th) - np.cos(theta0)

    def armed(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 5] * pts[..., 2] > 0

    def image_armed(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 5] * pts[..., 2] < 0

    def reset(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 5] *= -1.0
        return out

    def to_reduced(pts):
        pts = np.asarray(pts, dtype=float)
        th = pts[..., 2]
        v = pts[..., 3] * np.cos(th) + pts[..., 4] * np.sin(th)
        return np.stack([v, pts[..., 5], th], axis=-1)

    return HybridSystem(
        dim=6, box=box,
        vector_field=field,
        guard_level=level, guard_armed=armed,
        reset=reset, image_level=level, image_armed=image_armed,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        name="chaplygin-full",
        params={"m": m, "a": a, "I": inertia, "theta0": theta0,
                "to_reduced": to_reduced},
    )


# ---------------------------------------------------------------------------
# Aff(1): the non-normal-subgroup case
# ---------------------------------------------------------------------------

def make_aff1_full(g0=(1.0, 1.0)) -> HybridSystem:
    """Full impact system on Aff(1): coordinates (a, b, pa, pb).

    Left-invariant kinetic Hamiltonian H = a^2 (pa^2 + pb^2)/2; the impact
    surface is the coset ray through g0 and the reset is the elastic
    reflection of the corner conditions.
    """
    a0, b0 = float(g0[0]), float(g0[1])
    nn = a0 * a0 + b0 * b0
    box = DomainBox.make([0.05, -20, -20, -20], [20, 20, 20, 20])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        a, pa, pb = pts[..., 0], pts[..., 2], pts[..., 3]
        return np.stack([a * a * pa, a * a * pb,
                         -a * (pa * pa + pb * pb),
                         np.zeros(pts.shape[:-1])], axis=-1)

    def level(pts):
        pts = np.asarray(pts, dtype=float)
        return pts[..., 1] * a0 - pts[..., 0] * b0

    def reset(pts):
        pts = np.asarray(pts, dtype=float)
        lam = (-b0 * pts[..., 2] + a0 * pts[..., 3]) / nn
        out = np.array(pts, copy=True)
        out[..., 2] -= 2.0 * lam * (-b0)
        out[..., 3] -= 2.0 * lam * a0
        return out

    def momentum_map(pts):
        pts = np.asarray(pts, dtype=float)
        a, b = pts[..., 0], pts[..., 1]
        return np.stack([a * pts[..., 2], a * pts[..., 3],
                         b / a - b0 / a0], axis=-1)

    return HybridSystem(
        dim=4, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=reset, image_level=level,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        self_imaged=True,
        name="aff1-full",
        params={"g0": (a0, b0), "momentum_map": momentum_map},
    )


def make_aff1_reduced(g0=(1.0, 1.0)) -> HybridSystem:
    """Candidate reduced Aff(1) system built by the coset-reduction recipe.

    Coadjoint flow on (zeta1, zeta2) plus the coset coordinate q = b/a - b0/a0,
    with the jump constrained to the annihilator of the subalgebra (the
    recipe valid for normal subgroups): zeta2 -> -zeta2.  The subgroup here
    is not normal, so this model deliberately disagrees with the full system
    after the first impact; the reduction verifier must report the mismatch.
    """
    a0, b0 = float(g0[0]), float(g0[1])
    r0 = b0 / a0
    box = DomainBox.make([-20, -20, -20], [20, 20, 20])

    def field(pts):
        pts = np.asarray(pts, dtype=float)
        z1, z2, q = pts[..., 0], pts[..., 1], pts[..., 2]
        return np.stack([-z2 * z2, z1 * z2, z2 - (q + r0) * z1], axis=-1)

    def level(pts):
        return np.asarray(pts, dtype=float)[..., 2]

    def reset(pts):
        out = np.array(pts, dtype=float, copy=True)
        out[..., 1] *= -1.0
        return out

    return HybridSystem(
        dim=3, box=box,
        vector_field=field,
        guard_level=level, guard_armed=_true_like_bool,
        reset=reset, image_level=level,
        preimages=lambda y: [reset(np.asarray(y, dtype=float))],
        preimage_map=reset,
        self_imaged=True,
        name="aff1-reduced",
        params={"g0": (a0, b0)},
    )


# ---------------------------------------------------------------------------
# registry and initial densities
# ---------------------------------------------------------------------------

def make(model_id: str, **params) -> HybridSystem:
    """Build a registered model by id with keyword parameters."""
    if model_id == "ball":
        params.setdefault("c", 1.0)
        return make_bouncing_ball(**params)
    if model_id == "ball-inelastic":
        params.setdefault("c", 0.5)
        return make_bouncing_ball(**params)
    if model_id == "filippov":
        return make_filippov(**params)
    if model_id == "chaplygin3d":
        return make_chaplygin3d(**params)
    if model_id == "chaplygin2d":
        return make_chaplygin2d(**params)
    if model_id == "gl2":
        return make_gl2_model(**params)
    if model_id == "qc":
        return make_qc_system(**params)
    raise KeyError(f"unknown model id {model_id!r}; known: {', '.join(MODEL_IDS)}")


def initial_density(name: str, sys: HybridSystem):
    """Builtin initial densities selectable from run configs."""
    if name == "ball_gauss":
        def f(pts):
            pts = np.asarray(pts, dtype=float)
            return np.exp(-(pts[..., 0] - 1.0) ** 2 - pts[..., 1] ** 2)
        return f
    if name == "chap2d_gauss":
        def f(pts, sheet):
            pts = np.asarray(pts, dtype=float)
            base = np.exp(-pts[..., 0] ** 2 - pts[..., 1] ** 2)
            return np.where(np.asarray(sheet) == 0, base, 0.0)
        return f
    if name == "filippov_invariant":
        return filippov_invariant_density(sys.params["alpha"])
    if name == "uniform":
        if sys.sheets > 1:
            return lambda pts, sheet: np.ones(np.asarray(pts).shape[:-1])
        return lambda pts: np.ones(np.asarray(pts).shape[:-1])
    raise KeyError(f"unknown initial density {name!r}")
