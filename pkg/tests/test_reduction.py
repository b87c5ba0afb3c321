import numpy as np
import pytest

from hybridfp import models, reduction
from hybridfp.flow import IntegratorConfig, integrate
from hybridfp.reduction import (
    LieAlgebraSpec,
    ReducedModel,
    build_qC_system,
    coad_rhs,
    gl_algebra,
    gl_jump,
    load_structure_file,
    so3_algebra,
    verify_reduction,
)


def test_so3_bracket_is_cross_product():
    so3 = so3_algebra()
    rng = np.random.default_rng(0)
    for _ in range(20):
        u, v = rng.normal(size=(2, 3))
        assert np.allclose(so3.bracket(u, v), np.cross(u, v), atol=1e-12)


def test_coad_rhs_symmetric_top_is_stationary():
    so3 = so3_algebra()
    model = ReducedModel(algebra=so3, dh=lambda z: z,
                         q_rhs=None, jump=lambda z: np.zeros(3))
    assert np.allclose(coad_rhs(model, [0.4, -1.0, 2.0]), 0.0, atol=1e-14)


def test_coad_rhs_free_rigid_body_cross_product():
    so3 = so3_algebra()
    inertia = np.diag([1.0, 2.0, 3.0])
    model = ReducedModel(algebra=so3, dh=lambda z: inertia @ z,
                         q_rhs=None, jump=lambda z: np.zeros(3))
    zeta = np.array([1.0, 1.0, 1.0])
    # zeta x dh, the classical rigid-body form
    assert np.allclose(coad_rhs(model, zeta), np.cross(zeta, inertia @ zeta))
    assert np.allclose(coad_rhs(model, zeta), [1.0, -2.0, 1.0])


def test_gl2_coadjoint_matches_component_form():
    gl2 = gl_algebra(2)
    model = ReducedModel(algebra=gl2, dh=lambda z: z,
                         q_rhs=None, jump=lambda z: gl_jump(2, z))
    rng = np.random.default_rng(1)
    for _ in range(25):
        z = rng.normal(size=4)
        z1, z2, z3, z4 = z
        cross = (z1 - z4) * (z2 - z3)
        expected = np.array([-z2**2 + z3**2, cross, cross, z2**2 - z3**2])
        assert np.allclose(coad_rhs(model, z), expected, atol=1e-12)


def test_structure_constant_validation():
    bad = np.zeros((2, 2, 2))
    bad[0, 1, 0] = 1.0  # not antisymmetric
    with pytest.raises(ValueError):
        LieAlgebraSpec(dim=2, structure=bad)
    nonjacobi = np.zeros((3, 3, 3))
    # [e0,e1] = e1, [e0,e2] = e2, [e1,e2] = e0: the cyclic Jacobi sum is 2 e0
    nonjacobi[0, 1, 1] = 1.0
    nonjacobi[1, 0, 1] = -1.0
    nonjacobi[0, 2, 2] = 1.0
    nonjacobi[2, 0, 2] = -1.0
    nonjacobi[1, 2, 0] = 1.0
    nonjacobi[2, 1, 0] = -1.0
    with pytest.raises(ValueError):
        LieAlgebraSpec(dim=3, structure=nonjacobi)


def test_structure_file_round_trip(tmp_path):
    so3 = so3_algebra()
    path = tmp_path / "so3.txt"
    lines = ["# so3 structure"]
    for i in range(3):
        for j in range(3):
            for k in range(3):
                if so3.structure[i, j, k] != 0:
                    lines.append(f"{i} {j} {k} {so3.structure[i, j, k]}")
    path.write_text("\n".join(lines) + "\n")
    loaded = load_structure_file(str(path), 3)
    assert np.allclose(loaded.structure, so3.structure)


def test_structure_file_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 2\n")
    with pytest.raises(ValueError):
        load_structure_file(str(path), 3)
    path.write_text("0 1 9 1.0\n")
    with pytest.raises(ValueError):
        load_structure_file(str(path), 3)


def test_gl_jump_examples():
    assert np.allclose(gl_jump(2, np.eye(2)), np.diag([-2.0, -2.0]))
    zeta = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.trace(zeta + gl_jump(2, zeta)) == -np.trace(zeta)
    traceless = np.array([[1.0, 3.0], [2.0, -1.0]])
    assert np.allclose(gl_jump(2, traceless), 0.0)
    z = np.array([[3.0, 1.0], [0.0, -1.0]])
    h = lambda m: 0.5 * np.trace(m @ m.T)
    assert h(z + gl_jump(2, z)) == h(z) == 5.5


def test_gl_jump_energy_preserved_randomly():
    rng = np.random.default_rng(8)
    h = lambda m: 0.5 * np.trace(m @ m.T)
    for _ in range(1000):
        z = rng.normal(size=(2, 2))
        assert abs(h(z + gl_jump(2, z)) - h(z)) < 1e-10
    for _ in range(100):
        z = rng.normal(size=(3, 3))
        assert abs(h(z + gl_jump(3, z)) - h(z)) < 1e-10


def test_gl2_casimirs_conserved_along_flow():
    gl2 = models.make_gl2_model()
    z0 = np.array([1.0, 2.0, 3.0, -1.5, -0.5])  # trace -0.5: q stays below 0
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-12, record_stride=10)
    traj = integrate(gl2, z0, 0.0, 1.0, cfg)
    C = traj.states[:, 0] + traj.states[:, 3]
    D = traj.states[:, 2] - traj.states[:, 1]
    assert np.abs(C - C[0]).max() < 1e-10
    assert np.abs(D - D[0]).max() < 1e-10
    h = 0.5 * np.sum(traj.states[:, :4] ** 2, axis=1)
    assert np.abs(h - h[0]).max() < 1e-10


def test_qc_system_build():
    qc = build_qC_system()
    f = qc.vector_field(np.array([[1.0, -2.0]]))
    assert np.allclose(f, [[-4.0, 0.0]])
    assert np.allclose(qc.reset(np.array([0.0, -2.0])), [0.0, 2.0])


def test_qc_no_positive_root_case():
    # q(0) = -0.5, C = -2: q(t) = 0.5 e^{-2t} - 1 never reaches zero
    qc = build_qC_system()
    traj = integrate(qc, [-0.5, -2.0], 0.0, 4.0, IntegratorConfig(dt_max=1e-3))
    assert len(traj.events) == 0


def test_verify_reduction_gl2_short():
    full = models.make_gl2_full()
    red = models.make_gl2_model()
    a0 = np.array([[1.1, 0.0], [0.2, 1.0]])
    zeta0 = np.array([[0.2, 0.4], [-0.3, 0.1]])
    p0 = np.linalg.solve(a0.T, zeta0)
    x0 = np.concatenate([a0.reshape(-1), p0.reshape(-1)])
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-10)
    rep = verify_reduction(full, red, full.params["momentum_map"], x0, 0.5, cfg)
    assert rep.max_state_mismatch < 1e-7
    assert rep.matched_events


def test_verify_reduction_independent_of_section_point():
    # the reduced gl2 trajectory depends only on (zeta0, q0), not on which
    # group element realizes them
    red = models.make_gl2_model()
    full = models.make_gl2_full()
    mm = full.params["momentum_map"]
    zeta0 = np.array([[-0.4, 0.3], [0.2, -0.6]])
    cfg = IntegratorConfig(dt_max=1e-3, impact_tol=1e-10)
    ends = []
    for a0 in (np.array([[1.2, 0.1], [0.0, 1.0]]),
               np.array([[1.0, 0.0], [0.4, 1.2]])):
        a0 = a0 * (1.2 / np.linalg.det(a0)) ** 0.5  # same det, hence same q0
        p0 = np.linalg.solve(a0.T, zeta0)
        x0 = np.concatenate([a0.reshape(-1), p0.reshape(-1)])
        traj = integrate(full, x0, 0.0, 1.0, cfg)
        ends.append(mm(traj.final_state))
    assert np.allclose(ends[0], ends[1], atol=1e-8)
