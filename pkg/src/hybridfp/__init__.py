"""Hybrid dynamical systems toolkit.

Simulates flows with guard-triggered resets, evolves densities under the
associated transfer operator with a semi-Lagrangian PDE solver, computes
hybrid Jacobians from volume-form frames, builds Lie-Poisson-reduced impact
systems, and cross-validates everything against a Monte-Carlo ensemble
oracle.
"""

from .core import (
    DomainBox,
    HybridError,
    HybridSystem,
    decompose_tangent,
    eval_guard,
)
from .flow import (
    HybridTrajectory,
    IntegratorConfig,
    Termination,
    integrate,
    integrate_backward,
    locate_crossing,
)
from .oracle import EnsembleCloud, compare, histogram, push, sample
from .reduction import (
    LieAlgebraSpec,
    ReducedModel,
    build_qC_system,
    coad_rhs,
    gl_jump,
    verify_reduction,
)
from .transfer import (
    DensityField,
    GridSpec,
    SolverConfig,
    backward_characteristic,
    evolve,
    step_density,
)
from .volume import (
    JacobianReport,
    augmented_pushforward,
    divergence_mu,
    guard_tangent_basis,
    hybrid_jacobian,
)

__version__ = "0.1.0"
