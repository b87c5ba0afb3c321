import dataclasses

import numpy as np
import pytest

from hybridfp import models, volume
from hybridfp.core import DomainError
from hybridfp.flow import IntegratorConfig, Termination, integrate

ALL_IDS = models.MODEL_IDS


@pytest.mark.parametrize("model_id", ALL_IDS)
def test_registry_builds(model_id):
    sys = models.make(model_id)
    assert sys.dim >= 2
    assert sys.sheets in (1, 2)


def test_unknown_model():
    with pytest.raises(KeyError):
        models.make("pendulum")


@pytest.mark.parametrize("model_id", ["ball", "ball-inelastic", "filippov",
                                      "chaplygin3d", "gl2", "qc"])
def test_construction_invariants(model_id):
    """Resets land on the declared image set and preimages invert the reset."""
    sys = models.make(model_id)
    sampler = sys.params["sample_guard"]
    rng = np.random.default_rng(11)
    pts = sampler(200, rng)
    for x in pts:
        y = np.asarray(sys.reset(x), dtype=float)
        assert abs(float(sys.image_level(y))) < 1e-8
        pres = sys.preimages(y)
        assert any(np.allclose(sys.reset(z), y, atol=1e-8) for z in pres)
    # reference density positive on the domain box
    box = sys.box
    interior = box.lo + rng.random((500, sys.dim)) * box.extent
    assert np.all(sys.rho(interior) > 0)


@pytest.mark.parametrize("model_id", ["ball", "ball-inelastic", "chaplygin3d"])
def test_sampled_guard_image_disjoint(model_id):
    """Armed guard and armed image never coincide at sampled guard points."""
    sys = models.make(model_id)
    assert not sys.self_imaged
    rng = np.random.default_rng(5)
    pts = sys.params["sample_guard"](1000, rng)
    armed = np.asarray(sys.guard_armed(pts), dtype=bool)
    img_armed = np.asarray(sys.image_armed(pts), dtype=bool)
    assert np.all(armed)
    assert not np.any(armed & img_armed)


@pytest.mark.parametrize("model_id", ["filippov", "gl2", "qc"])
def test_self_imaged_models_declare_it(model_id):
    sys = models.make(model_id)
    assert sys.self_imaged
    rng = np.random.default_rng(5)
    pts = sys.params["sample_guard"](100, rng)
    assert np.allclose(sys.image_level(pts), sys.guard_level(pts))


@pytest.mark.parametrize("model_id", ALL_IDS)
def test_divergence_matches_numeric_fallback(model_id):
    sys = models.make(model_id)
    if sys.sheets > 1:
        pytest.skip("sheeted model checked via its 3d companion")
    rng = np.random.default_rng(7)
    numeric = dataclasses.replace(sys, divergence=None)
    count = 0
    while count < 100:
        x = sys.box.lo + rng.random(sys.dim) * sys.box.extent
        if abs(float(sys.guard_level(x))) < 1e-2:
            continue  # stay away from the guard where fields may switch
        a = volume.divergence_mu(sys, x)
        b = volume.divergence_mu(numeric, x)
        assert abs(a - b) < 1e-6
        count += 1


def test_ball_requires_valid_params():
    with pytest.raises(DomainError):
        models.make_bouncing_ball(c=0.0)
    with pytest.raises(DomainError):
        models.make_bouncing_ball(m=-1.0)


def test_ball_apex_ratio_is_c4():
    # energy at apex is p^2/2 after each bounce; momentum scales by c^2
    c = 0.5
    ball = models.make_bouncing_ball(c=c)
    cfg = IntegratorConfig(dt_max=1e-4, impact_tol=1e-12, max_impacts=10)
    traj = integrate(ball, [1.0, 0.0], 0.0, 3.0, cfg)
    p_after = np.array([e.x_post[1] for e in traj.events[:3]])
    apex = p_after ** 2 / 2.0
    assert np.allclose(apex[1:] / apex[:-1], c ** 4, rtol=1e-6)


def test_ball_preimage_formula():
    ball = models.make_bouncing_ball(c=0.5)
    y = np.array([0.0, 0.8])
    (z,) = ball.preimages(y)
    assert np.allclose(z, [0.0, -0.8 / 0.25])


def test_filippov_invariant_density_jump():
    alpha = np.exp(np.pi)
    rho = models.filippov_invariant_density(alpha)
    # jump across the +x axis: the un-crossed side carries e^pi per unit of
    # the just-crossed side
    up = rho(np.array([[1.0, 1e-13]]))[0]
    down = rho(np.array([[1.0, -1e-13]]))[0]
    assert abs(up / down - np.exp(np.pi)) < 1e-6
    # same magnitude at the y axis
    left = rho(np.array([[-1e-13, 1.0]]))[0]
    right = rho(np.array([[1e-13, 1.0]]))[0]
    assert abs(max(left, right) / min(left, right) - np.exp(np.pi)) < 1e-6


def test_filippov_flow_direction_and_rotation():
    # trajectories cross quadrants clockwise: Q1 -> Q4 through the +x axis
    fil = models.make_filippov(alpha=2.0)
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-10, max_impacts=50)
    traj = integrate(fil, [0.1, 1.0], 0.0, 3.5, cfg)
    assert len(traj.events) >= 2
    e = traj.events[0]
    assert abs(e.x_pre[1]) < 1e-8 and e.x_pre[0] > 0  # hits the +x axis first


def test_chaplygin3d_energy_and_equilibrium():
    ch = models.make_chaplygin3d()
    energy = ch.params["energy"]
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-10)
    traj = integrate(ch, [1.1, 0.9, 0.0], 0.0, 8.0, cfg)
    assert len(traj.events) >= 1
    e0 = energy(np.array([1.1, 0.9, 0.0]))
    assert np.abs(energy(traj.states) - e0).max() < 1e-8
    # omega = 0 is invariant: no impacts ever
    still = integrate(ch, [1.5, 0.0, 0.3], 0.0, 5.0, cfg)
    assert len(still.events) == 0
    assert np.allclose(still.final_state, [1.5, 0.0, 0.3], atol=1e-12)


def test_chaplygin3d_zero_impact_trajectories_exist():
    # small omega, large v: omega decays before theta reaches theta0
    ch = models.make_chaplygin3d()
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-10)
    traj = integrate(ch, [2.5, 0.12, 0.0], 0.0, 20.0, cfg)
    assert traj.terminated == Termination.TIME_REACHED
    assert len(traj.events) == 0
    assert np.abs(traj.states[:, 2]).max() < ch.params["theta0"]


def test_chaplygin2d_domain_error():
    with pytest.raises(DomainError):
        models.make_chaplygin2d(energy=-1.0)


def test_chaplygin2d_consistent_with_3d_on_energy_level():
    ch2 = models.make_chaplygin2d()
    ch3 = models.make_chaplygin3d()
    c1, c2 = ch2.params["C1"], ch2.params["C2"]
    # |omega| from the 3d model matches sqrt(C1 - C2 v^2) along a trajectory
    x0 = np.array([0.0, np.sqrt(c1), 0.0])  # energy exactly E of the 2d model
    cfg = IntegratorConfig(dt_max=1e-4, impact_tol=1e-10)
    traj = integrate(ch3, x0, 0.0, 2.0, cfg)
    v, w = traj.states[:, 0], traj.states[:, 1]
    assert np.abs(np.abs(w) - np.sqrt(np.maximum(c1 - c2 * v * v, 0))).max() < 1e-6
    # fixed point of the v dynamics
    vstar = ch2.params["vstar"]
    f = ch2.vector_field(np.array([[vstar, 0.0]]), np.array([0]))
    assert abs(f[0, 0]) < 1e-12


def test_gl2_reset_is_trace_jump():
    from hybridfp.reduction import gl_jump
    gl2 = models.make_gl2_model()
    rng = np.random.default_rng(2)
    for _ in range(50):
        z = np.concatenate([rng.normal(size=4), [0.0]])
        got = gl2.reset(z)[:4]
        want = z[:4] + gl_jump(2, z[:4])
        assert np.allclose(got, want, atol=1e-12)


def test_gl2_jump_flips_trace_and_preserves_h():
    gl2 = models.make_gl2_model()
    z = np.array([1.0, 2.0, 3.0, 4.0, 0.0])
    zp = gl2.reset(z)
    assert np.allclose(zp[:4], [-4.0, 2.0, 3.0, -1.0])
    assert zp[0] + zp[3] == -(z[0] + z[3])
    h = lambda v: 0.5 * np.sum(v[:4] ** 2)
    assert h(zp) == h(z) == 15.0


def test_gl2_full_system_conserves_energy_across_reset():
    full = models.make_gl2_full()
    rng = np.random.default_rng(4)
    a = np.eye(2) + 0.2 * rng.normal(size=(2, 2))
    a *= (1.0 / np.linalg.det(a)) ** 0.5  # place the state on det = 1
    p = rng.normal(size=(2, 2))
    x = np.concatenate([a.reshape(-1), p.reshape(-1)])
    h = lambda s: 0.5 * np.sum(
        (s[:4].reshape(2, 2).T @ s[4:].reshape(2, 2)) ** 2)
    xp = full.reset(x)
    assert abs(h(xp) - h(x)) < 1e-12
    # reduced jump of the momentum map equals the trace jump
    mm = full.params["momentum_map"]
    dz = mm(xp)[:4] - mm(x)[:4]
    tr = mm(x)[0] + mm(x)[3]
    assert np.allclose(dz, [-tr, 0.0, 0.0, -tr], atol=1e-10)


def test_qc_one_impact_and_closed_form():
    qc = models.make_qc_system()
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-12)
    traj = integrate(qc, [1.0, -2.0], 0.0, 0.5, cfg)
    assert len(traj.events) == 1
    assert abs(traj.events[0].t - np.log(2.0) / 2.0) < 1e-10
    # no-impact case: q0 in (-1, 0) with C < 0 decays away from the guard
    none = integrate(qc, [-0.5, -2.0], 0.0, 3.0, cfg)
    assert len(none.events) == 0


def test_aff1_full_energy_conserved():
    fa = models.make_aff1_full()
    h = lambda s: 0.5 * s[0] ** 2 * (s[2] ** 2 + s[3] ** 2)
    x = np.array([2.0, 2.0, 0.3, -0.7])
    xp = fa.reset(x)
    assert abs(h(xp) - h(x)) < 1e-12
    assert np.allclose(xp[:2], x[:2])


def test_initial_density_names():
    ball = models.make_bouncing_ball()
    f = models.initial_density("ball_gauss", ball)
    assert abs(f(np.array([[1.0, 0.0]]))[0] - 1.0) < 1e-12
    with pytest.raises(KeyError):
        models.initial_density("nope", ball)
