import numpy as np
import pytest

from hybridfp import models, volume
from hybridfp.core import SingularFrameError
from hybridfp.volume import (
    augmented_pushforward,
    divergence_mu,
    guard_tangent_basis,
    hybrid_jacobian,
    inverse_system,
    surface_form_ratio,
)


def test_guard_basis_examples():
    ball = models.make_bouncing_ball()
    basis = guard_tangent_basis(ball, np.array([0.0, -1.0]))
    assert np.allclose(basis, [[0.0, 1.0]])
    fil = models.make_filippov(alpha=2.0)
    basis = guard_tangent_basis(fil, np.array([2.0, 0.0]))
    assert np.allclose(basis, [[1.0, 0.0]])
    ch = models.make_chaplygin3d()
    th0 = ch.params["theta0"]
    basis = guard_tangent_basis(ch, np.array([0.5, 0.5, th0]))
    assert np.allclose(basis, [[1, 0, 0], [0, 1, 0]])


def test_augmented_pushforward_examples():
    ball = models.make_bouncing_ball()
    x = np.array([0.0, -1.0])
    # tangent vector maps through the reset differential
    out = augmented_pushforward(ball, x, [0.0, 1.0])
    assert np.allclose(out, [0.0, -1.0], atol=1e-10)
    # the flow direction maps onto the field at the image point
    out = augmented_pushforward(ball, x, [-1.0, -1.0])
    assert np.allclose(out, ball.vector_field(ball.reset(x)), atol=1e-10)
    fil = models.make_filippov(alpha=2.0)
    out = augmented_pushforward(fil, np.array([2.0, 0.0]), [1.0, 0.0])
    assert np.allclose(out, [1.0, 0.0], atol=1e-10)


@pytest.mark.parametrize("c,expected", [(1.0, 1.0), (0.5, 0.0625)])
def test_ball_jacobian(c, expected):
    ball = models.make_bouncing_ball(c=c)
    rep = hybrid_jacobian(ball, np.array([0.0, -1.0]))
    assert rep.method == "frames"
    assert abs(rep.jac - expected) < 1e-10
    assert rep.basis_residual < 1e-8
    assert np.isfinite(rep.cond)


def test_filippov_jacobian_frames_and_analytic():
    fil = models.make_filippov(alpha=2.0)
    for x in ([2.0, 0.0], [0.0, 1.5], [-0.7, 0.0], [0.0, -1.1]):
        rep = hybrid_jacobian(fil, np.array(x), prefer_analytic=False)
        assert abs(rep.jac - 4.0) < 1e-6
        rep = hybrid_jacobian(fil, np.array(x))
        assert rep.jac == 4.0 and rep.method == "analytic"


def test_gl2_jacobian_published_value():
    gl2 = models.make_gl2_model()
    z = np.array([1.0, 2.0, 3.0, 4.0, 0.0])
    rep = hybrid_jacobian(gl2, z)
    assert rep.jac == -1.0 and rep.method == "analytic"
    # the raw frame determinant of the augmented differential is +1; the
    # published value is kept as the model's closed form (see design notes)
    rep = hybrid_jacobian(gl2, z, prefer_analytic=False)
    assert abs(rep.jac - 1.0) < 1e-9


def test_jacobian_invariant_under_rotated_basis():
    ball = models.make_bouncing_ball(c=0.7)
    x = np.array([0.0, -0.8])
    base = guard_tangent_basis(ball, x)
    rep0 = hybrid_jacobian(ball, x, prefer_analytic=False, basis=base)
    rng = np.random.default_rng(3)
    for _ in range(5):
        sign = rng.choice([-1.0, 1.0])
        rep = hybrid_jacobian(ball, x, prefer_analytic=False,
                              basis=sign * base)
        assert abs(rep.jac - rep0.jac) < 1e-8
    ch = models.make_chaplygin3d()
    xg = np.array([0.6, 0.8, ch.params["theta0"]])
    base = guard_tangent_basis(ch, xg)
    rep0 = hybrid_jacobian(ch, xg, prefer_analytic=False, basis=base)
    for _ in range(5):
        th = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
        rep = hybrid_jacobian(ch, xg, prefer_analytic=False, basis=rot @ base)
        assert abs(rep.jac - rep0.jac) < 1e-8


def test_transverse_property_equivalence():
    # full-frame ratio equals the induced surface-form ratio
    for sys, pts in [
        (models.make_bouncing_ball(c=0.6), [[0.0, -1.0], [0.0, -2.2]]),
        (models.make_filippov(alpha=2.0), [[1.3, 0.0], [0.0, -0.4]]),
    ]:
        for x in pts:
            full = hybrid_jacobian(sys, np.array(x), prefer_analytic=False).jac
            surf = surface_form_ratio(sys, np.array(x))
            assert abs(full - surf) < 1e-6


@pytest.mark.parametrize("maker,guard_pt", [
    (lambda: models.make_bouncing_ball(c=0.5), [0.0, -1.2]),
    (lambda: models.make_filippov(alpha=2.0), [1.1, 0.0]),
    (models.make_chaplygin3d, [0.5, 0.9, np.pi / 4]),
    (models.make_gl2_model, [1.0, 2.0, 3.0, 4.0, 0.0]),
    (models.make_qc_system, [0.0, -2.0]),
])
def test_inverse_determinant_identity(maker, guard_pt):
    sys = maker()
    x = np.array(guard_pt, dtype=float)
    jac = hybrid_jacobian(sys, x, prefer_analytic=False).jac
    inv = inverse_system(sys)
    y = np.asarray(sys.reset(x), dtype=float)
    jac_inv = hybrid_jacobian(inv, y, prefer_analytic=False).jac
    assert abs(jac * jac_inv - 1.0) < 1e-6


def test_fd_reset_jacobian_matches_analytic():
    from dataclasses import replace
    ball = models.make_bouncing_ball(c=0.5)
    x = np.array([0.0, -1.0])
    fd_sys = replace(ball, reset_jacobian=None)
    a = hybrid_jacobian(ball, x, prefer_analytic=False).jac
    b = hybrid_jacobian(fd_sys, x, prefer_analytic=False).jac
    assert abs(a - b) < 1e-6


def test_divergence_examples():
    ball = models.make_bouncing_ball()
    assert divergence_mu(ball, np.array([1.0, 0.5])) == 0.0
    ch = models.make_chaplygin3d()
    m, a, inertia = ch.params["m"], ch.params["a"], ch.params["I"]
    k = m * a / (inertia + m * a * a)
    x = np.array([1.3, 0.5, 0.2])
    assert abs(divergence_mu(ch, x) + k * 1.3) < 1e-12
    gl2 = models.make_gl2_model()
    z = np.array([1.0, 2.0, 3.0, 4.0, 0.3])
    assert divergence_mu(gl2, z) == 5.0  # tr(zeta)


def test_divergence_numeric_fallback():
    from dataclasses import replace
    for sys, x in [
        (models.make_chaplygin3d(), np.array([1.0, 0.4, 0.2])),
        (models.make_gl2_model(), np.array([0.5, -0.2, 0.8, 0.1, 0.2])),
        (models.make_qc_system(), np.array([0.5, -1.0])),
    ]:
        numeric = divergence_mu(replace(sys, divergence=None), x)
        assert abs(numeric - divergence_mu(sys, x)) < 1e-6


def test_singular_frame_raises():
    from dataclasses import replace
    ball = models.make_bouncing_ball()
    broken = replace(ball, vector_field_pre=lambda pts: np.zeros(
        np.asarray(pts).shape[:-1] + (2,)))
    with pytest.raises(Exception):
        hybrid_jacobian(broken, np.array([0.0, -1.0]), prefer_analytic=False)
