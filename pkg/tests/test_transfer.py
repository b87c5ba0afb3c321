import dataclasses

import numpy as np
import pytest

from hybridfp import models, transfer
from hybridfp.core import DomainBox, InfinitePreimageError
from hybridfp.transfer import (
    DensityField,
    GridSpec,
    SolverConfig,
    backward_characteristic,
    evolve,
    grid_nodes,
    step_density,
)


def ball_grid(shape=(64, 64)):
    return GridSpec(box=DomainBox.make([0.0, -3.0], [4.0, 3.0]), shape=shape)


def test_grid_validation():
    box = DomainBox.make([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        GridSpec(box=box, shape=(3, 10))
    with pytest.raises(ValueError):
        GridSpec(box=box, shape=(4000, 4000))
    with pytest.raises(ValueError):
        GridSpec(box=box, shape=(10,))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, interpolation="spline9")
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, snapshot_times=(1.0, 0.5))


def test_backward_characteristic_ball_smooth():
    ball = models.make_bouncing_ball()
    cfg = SolverConfig(dt=0.01)
    feet = backward_characteristic(ball, [0.5, 1.0], 0.01, cfg)
    assert len(feet) == 1
    f = feet[0]
    # closed-form backward ballistic step: p_f = p + dt, x_f = x - p_f dt + dt^2/2
    assert np.allclose(f.point, [0.5 - 1.01 * 0.01 + 0.5e-4, 1.01], atol=1e-10)
    assert f.weight == 1.0
    assert abs(f.div_integral) < 1e-15


def test_backward_characteristic_teleport():
    ball = models.make_bouncing_ball()
    cfg = SolverConfig(dt=0.02)
    feet = backward_characteristic(ball, [0.005, 0.9], 0.02, cfg)
    assert len(feet) == 1
    f = feet[0]
    assert f.weight == 1.0  # elastic jump weight is one
    # verify against the event-located backward flow: cross at x=0, momentum
    # p_hit solves 0 = x - p_hit dt1 + dt1^2/2 ... check by forward replay:
    # flying the foot forward dt must reproduce the node after one bounce
    from hybridfp.flow import IntegratorConfig, integrate
    fwd = integrate(ball, f.point, 0.0, 0.02,
                    IntegratorConfig(dt_max=1e-4, impact_tol=1e-12))
    assert len(fwd.events) == 1
    assert np.allclose(fwd.final_state, [0.005, 0.9], atol=1e-6)


def test_backward_characteristic_zero_dt():
    ball = models.make_bouncing_ball()
    feet = backward_characteristic(ball, [0.3, -0.2], 0.0, SolverConfig(dt=0.01))
    assert len(feet) == 1
    assert np.allclose(feet[0].point, [0.3, -0.2])
    assert feet[0].weight == 1.0 and feet[0].div_integral == 0.0


def test_multi_preimage_fanout_sums():
    # quadratic-style reset with two preimages: u(t+, x) gets both branches
    ball = models.make_bouncing_ball()
    two = dataclasses.replace(
        ball,
        preimages=lambda y: [np.asarray(y, float) * [1.0, -1.0],
                             np.asarray(y, float) * [1.0, -0.5]],
        preimage_map=None,
        jump_weight=lambda pts: np.full(np.asarray(pts).shape[:-1], 2.0),
        params={},
    )
    cfg = SolverConfig(dt=0.02)
    feet = backward_characteristic(two, [0.005, 0.9], 0.02, cfg)
    assert len(feet) == 2
    assert all(abs(f.weight - 0.5) < 1e-12 for f in feet)


def test_infinite_preimage_cap():
    ball = models.make_bouncing_ball()
    crazy = dataclasses.replace(
        ball,
        preimages=lambda y: [np.asarray(y, float)] * 32,
        preimage_map=None,
        params={},
    )
    with pytest.raises(InfinitePreimageError):
        backward_characteristic(crazy, [0.005, 0.9], 0.02, SolverConfig(dt=0.02))


def test_uniform_density_fixed_by_identity_jump():
    # alpha = 1: both branches coincide, J = 1; div = -2 is compensated
    # exactly by the exponential, so the constant is recovered after one step
    fil = models.make_filippov(alpha=1.0)
    grid = GridSpec(box=fil.box, shape=(64, 64))
    nodes = grid_nodes(grid)
    u = DensityField(grid=grid, t=0.0, values=np.ones(grid.n_nodes).reshape(grid.shape))
    u.mass = u.compute_mass()
    cfg = SolverConfig(dt=0.01, interpolation="nearest", boundary="full_backtrack")
    u1 = step_density(fil, u, cfg, f0=lambda pts: np.ones(np.asarray(pts).shape[:-1]))
    assert np.allclose(u1.values, np.exp(0.02) * np.ones_like(u1.values), rtol=1e-10)


def test_elastic_ball_jump_condition():
    # nodes just inside the reset image satisfy u(t+, 0+, p) ~ u(t-, 0+, -p)
    ball = models.make_bouncing_ball()
    grid = ball_grid((128, 128))
    f0 = models.initial_density("ball_gauss", ball)
    cfg = SolverConfig(dt=0.005, interpolation="multilinear",
                       snapshot_times=(0.0, 0.9))
    snaps = evolve(ball, f0, grid, cfg)
    u = snaps[-1].values
    xs = grid.axis_centers(0)
    ps = grid.axis_centers(1)
    pi = np.searchsorted(ps, 1.6)   # incoming/outgoing momentum band
    mi = np.searchsorted(ps, -ps[pi])
    ratio = u[0, pi] / u[0, mi]
    assert abs(ratio - 1.0) < 0.15  # first-order interpolation error band


def test_max_principle_multilinear():
    ball = models.make_bouncing_ball()
    grid = ball_grid((64, 64))
    f0 = models.initial_density("ball_gauss", ball)
    cfg = SolverConfig(dt=0.01, interpolation="multilinear",
                       snapshot_times=(0.0, 0.2))
    snaps = evolve(ball, f0, grid, cfg)
    assert snaps[-1].values.max() <= snaps[0].values.max() + 1e-9


def test_evolve_zero_horizon_returns_sampled_f0():
    ball = models.make_bouncing_ball()
    grid = ball_grid((64, 64))
    f0 = models.initial_density("ball_gauss", ball)
    snaps = evolve(ball, f0, grid, SolverConfig(dt=0.01, snapshot_times=(0.0,)))
    assert len(snaps) == 1
    assert np.allclose(snaps[0].values.reshape(-1), f0(grid_nodes(grid)))


def test_snapshot_times_land_on_nearest_step():
    ball = models.make_bouncing_ball()
    grid = ball_grid((64, 64))
    f0 = models.initial_density("ball_gauss", ball)
    cfg = SolverConfig(dt=0.01, snapshot_times=(0.0, 0.032, 0.05))
    snaps = evolve(ball, f0, grid, cfg)
    assert [round(s.t, 10) for s in snaps] == [0.0, 0.03, 0.05]


def test_mass_cache_recomputable():
    ball = models.make_bouncing_ball()
    grid = ball_grid((64, 64))
    f0 = models.initial_density("ball_gauss", ball)
    cfg = SolverConfig(dt=0.01, interpolation="multilinear",
                       snapshot_times=(0.0, 0.1))
    for snap in evolve(ball, f0, grid, cfg):
        assert abs(snap.mass - snap.compute_mass()) < 1e-12
        snap.validate()


def test_density_field_validation():
    grid = ball_grid((64, 64))
    bad = DensityField(grid=grid, t=0.0,
                       values=-np.ones(grid.shape))
    with pytest.raises(ValueError):
        bad.validate()
    bad.validate(signed_ok=True)
    with pytest.raises(ValueError):
        DensityField(grid=grid, t=0.0, values=np.ones((3, 3)))


def test_sheeted_step_swaps_sheets():
    ch = models.make_chaplygin2d()
    grid = GridSpec(box=ch.box, shape=(32, 64), sheet_count=2)
    th0 = ch.params["theta0"]

    def f0(pts, sheet):
        pts = np.asarray(pts, dtype=float)
        band = (np.abs(pts[..., 1] - (th0 - 0.15)) < 0.1) & (np.abs(pts[..., 0]) < 0.5)
        return np.where((np.asarray(sheet) == 0) & band, 1.0, 0.0)

    cfg = SolverConfig(dt=0.05, interpolation="multilinear",
                       snapshot_times=(0.0, 0.6))
    snaps = evolve(ch, f0, grid, cfg)
    sheet1_mass = snaps[-1].values_sheeted[1].sum()
    assert snaps[0].values_sheeted[1].sum() == 0.0
    assert sheet1_mass > 0.1 * snaps[-1].values_sheeted.sum()  # band crossed over


def test_full_backtrack_matches_direct_initial_sampling():
    # with no crossings in range, full backtrack reproduces f0 transported
    ball = models.make_bouncing_ball()
    grid = GridSpec(box=DomainBox.make([0.5, -1.0], [3.0, 1.0]), shape=(32, 32))
    f0 = models.initial_density("ball_gauss", ball)
    cfg = SolverConfig(dt=0.01, interpolation="multilinear",
                       boundary="full_backtrack", snapshot_times=(0.0, 0.3))
    snaps = evolve(ball, f0, grid, cfg)
    # exact transported density: u(t,x) = f0(backflow(x)) since div = 0, J = 1
    nodes = grid_nodes(grid)
    t = snaps[-1].t
    pf = nodes[:, 1] + t
    xf = nodes[:, 0] - pf * t + t * t / 2
    exact = np.exp(-(xf - 1.0) ** 2 - pf ** 2)
    err = np.abs(snaps[-1].values.reshape(-1) - exact).reshape(grid.shape)
    # interior interpolation error dominates on this coarse grid; the top
    # edge is fed purely by backtracked characteristics and must be exact
    assert err.max() < 0.03
    assert err[:, -1].max() < 1e-10
