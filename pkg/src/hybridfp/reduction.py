"""Lie-Poisson machinery for left-invariant impact systems.

Builds reduced hybrid systems on (dual algebra) x (coset coordinate) from
structure constants and a reduced Hamiltonian differential.  The index
convention for the coadjoint equation is

    dzeta_j/dt = C[i][j][k] * dh^i * zeta_k,

with structure constants of the standard matrix commutator [A, B] = AB - BA;
this is the convention that reproduces both the so(3) cross-product form
zeta x dh and the printed gl(2) component equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import HybridSystem
from .flow import HybridTrajectory, IntegratorConfig, integrate

__all__ = [
    "LieAlgebraSpec",
    "ReducedModel",
    "ReductionReport",
    "so3_algebra",
    "gl_algebra",
    "load_structure_file",
    "coad_rhs",
    "gl_jump",
    "build_qC_system",
    "verify_reduction",
]


@dataclass(frozen=True)
class LieAlgebraSpec:
    """Structure constants C[i][j][k] with [e_i, e_j] = C[i][j][k] e_k."""

    dim: int
    structure: np.ndarray
    names: Optional[tuple] = None

    def __post_init__(self):
        c = np.asarray(self.structure, dtype=float)
        if c.shape != (self.dim,) * 3:
            raise ValueError("structure constants must be dim^3")
        anti = np.abs(c + np.transpose(c, (1, 0, 2))).max()
        if anti > 1e-12:
            raise ValueError(f"antisymmetry violated by {anti:g}")
        # Jacobi: sum over cyclic permutations of [[ei,ej],ek] must vanish
        comp = np.einsum("ijm,mkl->ijkl", c, c)
        jac = comp + np.transpose(comp, (1, 2, 0, 3)) + np.transpose(comp, (2, 0, 1, 3))
        if np.abs(jac).max() > 1e-10:
            raise ValueError(f"Jacobi identity violated by {np.abs(jac).max():g}")
        object.__setattr__(self, "structure", c)

    def bracket(self, u, v) -> np.ndarray:
        return np.einsum("ijk,i,j->k", self.structure, u, v)


def so3_algebra() -> LieAlgebraSpec:
    """so(3) with [u, v] = u x v."""
    c = np.zeros((3, 3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                c[i, j, k] = (np.sign((j - i) * (k - j) * (k - i))
                              if {i, j, k} == {0, 1, 2} else 0.0)
    return LieAlgebraSpec(dim=3, structure=c, names=("x", "y", "z"))


def gl_algebra(n: int) -> LieAlgebraSpec:
    """gl(n) in the basis E_ab flattened row-major, standard commutator."""
    d = n * n
    c = np.zeros((d, d, d))
    def idx(a, b):
        return a * n + b
    for a in range(n):
        for b in range(n):
            for p in range(n):
                for q in range(n):
                    i, j = idx(a, b), idx(p, q)
                    # [E_ab, E_pq] = delta_bp E_aq - delta_qa E_pb
                    if b == p:
                        c[i, j, idx(a, q)] += 1.0
                    if q == a:
                        c[i, j, idx(p, b)] -= 1.0
    return LieAlgebraSpec(dim=d, structure=c)


def load_structure_file(path: str, dim: int,
                        names: Optional[Sequence[str]] = None) -> LieAlgebraSpec:
    """Read structure constants from lines `i j k value` (zero-based)."""
    c = np.zeros((dim, dim, dim))
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#")[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 'i j k value'")
            i, j, k = (int(p) for p in parts[:3])
            if not all(0 <= v < dim for v in (i, j, k)):
                raise ValueError(f"{path}:{ln}: index out of range")
            c[i, j, k] = float(parts[3])
    return LieAlgebraSpec(dim=dim, structure=c,
                          names=tuple(names) if names else None)


@dataclass
class ReducedModel:
    """Reduced hybrid dynamics on (dual algebra) x (coset coordinate)."""

    algebra: LieAlgebraSpec
    dh: Callable
    q_rhs: Callable
    jump: Callable
    casimirs: List[Callable] = field(default_factory=list)

    def h_residual_across_jump(self, h: Callable, zeta) -> float:
        zeta = np.asarray(zeta, dtype=float)
        return abs(float(h(zeta + self.jump(zeta))) - float(h(zeta)))


def coad_rhs(model: ReducedModel, zeta) -> np.ndarray:
    """Coadjoint equation dzeta_j/dt = C[i][j][k] dh^i zeta_k."""
    zeta = np.asarray(zeta, dtype=float)
    dh = np.asarray(model.dh(zeta), dtype=float)
    return np.einsum("ijk,i,k->j", model.algebra.structure, dh, zeta)


def gl_jump(n: int, zeta) -> np.ndarray:
    """Impact jump for GL(n) with the unit-determinant coset surface.

    Returns -(2/n) tr(zeta) I_n, flattened like the input when the input is
    flat.  Energy h = tr(zeta zeta^T)/2 is conserved across zeta + jump.
    """
    zeta = np.asarray(zeta, dtype=float)
    flat = zeta.ndim == 1
    zmat = zeta.reshape(n, n) if flat else zeta
    delta = -(2.0 / n) * np.trace(zmat) * np.eye(n)
    return delta.reshape(-1) if flat else delta


def build_qC_system() -> HybridSystem:
    """The scalar impact-detection system (q, C); see models.make_qc_system."""
    from . import models
    return models.make_qc_system()


@dataclass
class ReductionReport:
    """Trajectory-level comparison of a full system against its reduction."""

    max_state_mismatch: float
    post_impact_mismatch: float
    impact_time_mismatch: float
    n_events_full: int
    n_events_reduced: int

    @property
    def matched_events(self) -> bool:
        return self.n_events_full == self.n_events_reduced


def _resample(traj: HybridTrajectory, times: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(times, traj.times, traj.states[:, i])
                     for i in range(traj.states.shape[1])], axis=-1)


def verify_reduction(full: HybridSystem, reduced: HybridSystem,
                     to_reduced: Callable, x0_full, T: float,
                     cfg: IntegratorConfig,
                     n_checkpoints: int = 200) -> ReductionReport:
    """Integrate both systems and compare the reduced coordinates.

    The full trajectory is mapped through `to_reduced` (the momentum map
    plus coset chart) and compared with the directly integrated reduced
    trajectory at checkpoint times; impact times are matched pairwise.
    """
    x0_full = np.asarray(x0_full, dtype=float)
    traj_full = integrate(full, x0_full, 0.0, T, cfg)
    z0 = np.asarray(to_reduced(x0_full), dtype=float)
    traj_red = integrate(reduced, z0, 0.0, T, cfg)

    t_end = min(traj_full.final_time, traj_red.final_time)
    checkpoints = np.linspace(0.0, t_end, n_checkpoints)
    # avoid sampling inside the event gap where pre/post states mix
    for e in traj_full.events + traj_red.events:
        checkpoints = checkpoints[np.abs(checkpoints - e.t) > 4 * cfg.dt_max]
    zf = np.asarray(to_reduced(_resample(traj_full, checkpoints)), dtype=float)
    zr = _resample(traj_red, checkpoints)
    mism = float(np.max(np.linalg.norm(zf - zr, axis=-1))) if len(checkpoints) else np.inf

    tf = traj_full.impact_times
    tr = traj_red.impact_times
    n = min(len(tf), len(tr))
    dt_mismatch = float(np.max(np.abs(tf[:n] - tr[:n]))) if n else 0.0
    post = 0.0
    for i in range(n):
        zf_post = np.asarray(to_reduced(traj_full.events[i].x_post), dtype=float)
        zr_post = traj_red.events[i].x_post
        post = max(post, float(np.linalg.norm(zf_post - zr_post)))
    return ReductionReport(
        max_state_mismatch=mism,
        post_impact_mismatch=post,
        impact_time_mismatch=dt_mismatch,
        n_events_full=len(tf),
        n_events_reduced=len(tr),
    )
