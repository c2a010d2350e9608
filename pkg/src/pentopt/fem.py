"""Plane-stress finite-element compliance evaluator.

Bilinear 4-node quadrilateral elements with unit size and thickness; the
element stiffness is the classic closed form used by 88-line topology
optimization codes, scaled by the Young's modulus. The mean compliance is
differentiable with respect to the element densities through the analytic
self-adjoint sensitivity; the linear solver itself is never differentiated.

DOF layout: nodes are numbered column-major on the (d+1) x (d+1) grid
(node n = row + (d+1)*col); node n owns DOFs 2n (x) and 2n+1 (y).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .domain import BoundaryConditionSet, DensityField, Level, X_MIN_DEFAULT

E_DEFAULT = 195000.0
NU_DEFAULT = 0.3
PENAL_DEFAULT = 3.0

# switch from dense Cholesky to a sparse direct solve above this mesh size
_DENSE_SOLVE_MAX_D = 16
_SPARSE_RESIDUAL_TOL = 1e-8


class SolverError(RuntimeError):
    """Raised when the reduced stiffness system cannot be solved."""


def element_stiffness(E: float = E_DEFAULT, nu: float = NU_DEFAULT) -> np.ndarray:
    """8x8 unit-density element stiffness (plane stress, unit thickness)."""
    k = np.array(
        [
            1 / 2 - nu / 6,
            1 / 8 + nu / 8,
            -1 / 4 - nu / 12,
            -1 / 8 + 3 * nu / 8,
            -1 / 4 + nu / 12,
            -1 / 8 - nu / 8,
            nu / 6,
            1 / 8 - 3 * nu / 8,
        ]
    )
    idx = np.array(
        [
            [0, 1, 2, 3, 4, 5, 6, 7],
            [1, 0, 7, 6, 5, 4, 3, 2],
            [2, 7, 0, 5, 6, 3, 4, 1],
            [3, 6, 5, 0, 7, 2, 1, 4],
            [4, 5, 6, 7, 0, 1, 2, 3],
            [5, 4, 3, 2, 1, 0, 7, 6],
            [6, 3, 4, 1, 2, 7, 0, 5],
            [7, 2, 1, 4, 3, 6, 5, 0],
        ]
    )
    return E / (1 - nu ** 2) * k[idx]


def element_dof_map(d: int) -> np.ndarray:
    """(d^2, 8) table of global DOF indices per element (column-major order)."""
    e = np.arange(d * d)
    i = e % d
    j = e // d
    n1 = (d + 1) * j + i
    n2 = (d + 1) * (j + 1) + i
    return np.stack(
        [2 * n1, 2 * n1 + 1, 2 * n2, 2 * n2 + 1, 2 * n2 + 2, 2 * n2 + 3,
         2 * n1 + 2, 2 * n1 + 3],
        axis=1,
    )


def build_force_vector(rs: np.ndarray, d: int) -> np.ndarray:
    """Collocate the static vector (x-block then y-block) into interleaved DOFs."""
    l = (d + 1) ** 2
    rs = np.asarray(rs, dtype=float)
    if rs.shape != (2 * l,):
        raise ValueError(f"static vector has length {rs.size}, expected {2 * l}")
    f = np.zeros(2 * l)
    f[0::2] = rs[:l]
    f[1::2] = rs[l:]
    return f


@dataclass
class FemProblem:
    """Mesh-level problem data reused across solves at one level."""

    level: Level
    bc: BoundaryConditionSet
    penal: float = PENAL_DEFAULT
    E: float = E_DEFAULT
    nu: float = NU_DEFAULT
    x_min: float = X_MIN_DEFAULT
    ke: np.ndarray = field(init=False)
    edof: np.ndarray = field(init=False)
    fixed_dofs: np.ndarray = field(init=False)
    free_dofs: np.ndarray = field(init=False)
    force: np.ndarray = field(init=False)

    def __post_init__(self):
        d = self.level.d
        bc_level = self.bc if self.bc.d_inp == d else self.bc.at_level(self.level)
        self.bc = bc_level
        self.ke = element_stiffness(self.E, self.nu)
        self.edof = element_dof_map(d)
        rk = bc_level.rk_vector()
        l = (d + 1) ** 2
        fixed = np.concatenate(
            [2 * np.flatnonzero(rk[:l] > 0), 2 * np.flatnonzero(rk[l:] > 0) + 1]
        )
        self.fixed_dofs = np.sort(fixed)
        self.free_dofs = np.setdiff1d(np.arange(2 * l), self.fixed_dofs)
        self.force = build_force_vector(bc_level.rs_vector(), d)

    @property
    def n_dofs(self) -> int:
        return 2 * self.level.node_count

    def _check_densities(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.level.d ** 2,):
            raise ValueError(
                f"density vector has length {x.size}, expected {self.level.d ** 2}"
            )
        if np.any(x < self.x_min - 1e-12) or np.any(x > 1.0 + 1e-12):
            raise ValueError("densities outside [x_min, 1]; clamp before solving")
        return x


def assemble_stiffness(x: DensityField | np.ndarray, prob: FemProblem):
    """Global stiffness K = sum_i x_i^p K_i as a sparse CSC matrix."""
    xv = x.x if isinstance(x, DensityField) else x
    xv = prob._check_densities(xv)
    scale = xv ** prob.penal
    vals = (prob.ke[None, :, :] * scale[:, None, None]).ravel()
    rows = np.repeat(prob.edof, 8, axis=1).ravel()
    cols = np.tile(prob.edof, (1, 8)).ravel()
    n = prob.n_dofs
    return scipy.sparse.csc_array((vals, (rows, cols)), shape=(n, n))


@dataclass
class ComplianceResult:
    c: float
    u: np.ndarray
    dc_dx: np.ndarray


def solve_compliance(
    x: DensityField | np.ndarray,
    bc: BoundaryConditionSet | None = None,
    prob: FemProblem | None = None,
    **prob_kwargs,
) -> ComplianceResult:
    """Solve K u = F on the free DOFs and return compliance + sensitivity.

    c = u_red^T K_red u_red; dc/dx_i = -p x_i^(p-1) u_i^T ke u_i.
    Forces on fixed DOFs contribute zero work and are dropped by reduction.
    """
    if prob is None:
        if bc is None:
            raise ValueError("either bc or prob must be given")
        level = x.level if isinstance(x, DensityField) else Level(
            1, int(round(np.sqrt(np.asarray(x).size)))
        )
        prob = FemProblem(level, bc, **prob_kwargs)
    xv = x.x if isinstance(x, DensityField) else np.asarray(x, dtype=float)
    xv = prob._check_densities(xv)

    free = prob.free_dofs
    if prob.fixed_dofs.size < 3:
        raise SolverError(
            f"only {prob.fixed_dofs.size} DOFs fixed; at least 3 required"
        )
    f_red = prob.force[free]

    k = assemble_stiffness(xv, prob)
    k_red = k[np.ix_(free, free)]
    if prob.level.d <= _DENSE_SOLVE_MAX_D:
        try:
            cho = scipy.linalg.cho_factor(k_red.toarray(), check_finite=False)
            u_red = scipy.linalg.cho_solve(cho, f_red, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            cond = np.linalg.cond(k_red.toarray())
            raise SolverError(
                f"reduced stiffness not positive definite (cond ~ {cond:.3e}); "
                "check kinematic boundary conditions"
            ) from exc
    else:
        u_red = scipy.sparse.linalg.spsolve(k_red.tocsc(), f_red)
        norm_f = np.linalg.norm(f_red)
        if norm_f > 0:
            residual = np.linalg.norm(k_red @ u_red - f_red) / norm_f
            if not np.isfinite(residual) or residual > _SPARSE_RESIDUAL_TOL:
                raise SolverError(
                    f"sparse solve residual {residual:.3e} exceeds "
                    f"{_SPARSE_RESIDUAL_TOL:.0e}; system likely singular"
                )

    u = np.zeros(prob.n_dofs)
    u[free] = u_red
    c = float(f_red @ u_red)

    ue = u[prob.edof]
    ce = np.einsum("ni,ij,nj->n", ue, prob.ke, ue)
    dc_dx = -prob.penal * xv ** (prob.penal - 1) * ce
    return ComplianceResult(c=c, u=u, dc_dx=dc_dx)
