"""2D electrostatics on the device grid.

Solves div(eps_r grad V) = -q (N_D - n) / eps0 with a 5-point finite-volume
stencil, harmonic-mean face permittivities, Dirichlet nodes at the gate and
at both contact columns, and homogeneous Neumann boundaries elsewhere.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import EPS0_F_PER_NM, Q_E
from .device import Grid

POTENTIAL = "potential"
ELECTRON_DENSITY = "electron_density"
LOG_DENSITY = "log_density"

DENSITY_FLOOR_CM3 = 1.0      # floor under the log10 map
RESIDUAL_RTOL = 1e-10

# q / eps0 in V nm per nm^-3 of charge
_Q_OVER_EPS0 = Q_E / EPS0_F_PER_NM
_CM3_TO_NM3 = 1e-21


@dataclass(frozen=True)
class Field:
    """A scalar quantity sampled on the grid nodes, indexed [ix, iy]."""

    values: np.ndarray
    quantity: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("field values must be a 2D array")
        if self.quantity == ELECTRON_DENSITY and (v < 0).any():
            raise ValueError("electron density must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def matches(self, grid: Grid) -> bool:
        return self.shape == (grid.nx, grid.ny)


def potential_field(values) -> Field:
    return Field(np.asarray(values, dtype=np.float64), POTENTIAL)


def density_field(values) -> Field:
    return Field(np.asarray(values, dtype=np.float64), ELECTRON_DENSITY)


def log_density_field(density: Field) -> Field:
    """log10 of the density with a 1 cm^-3 floor."""
    if density.quantity != ELECTRON_DENSITY:
        raise ValueError("expected an electron density field")
    vals = np.log10(np.maximum(density.values, DENSITY_FLOOR_CM3))
    return Field(vals, LOG_DENSITY)


def zero_density(grid: Grid) -> Field:
    return density_field(np.zeros((grid.nx, grid.ny)))


def core_solve(permittivity: np.ndarray, rhs: np.ndarray,
               dirichlet_mask: np.ndarray, dirichlet_values: np.ndarray,
               spacing: float) -> np.ndarray:
    """Solve div(eps grad V) = rhs on a uniform grid.

    rhs carries V/nm^2 units; omitted faces at outer boundaries give
    homogeneous Neumann conditions. Dirichlet rows replace the stencil.
    """
    nx, ny = permittivity.shape
    if not dirichlet_mask.any():
        raise ValueError("no Dirichlet node anywhere: system is singular")
    n = nx * ny
    inv_a2 = 1.0 / (spacing * spacing)

    idx = np.arange(n).reshape(nx, ny)
    diag = np.zeros(n)
    rows, cols, vals = [], [], []

    def add_faces(p_idx, n_idx, eps_p, eps_n):
        face = 2.0 * eps_p * eps_n / (eps_p + eps_n) * inv_a2
        p = p_idx.ravel()
        q = n_idx.ravel()
        f = face.ravel()
        np.add.at(diag, p, -f)
        rows.append(p)
        cols.append(q)
        vals.append(f)

    # x-direction faces (both orientations so every node sees each face)
    add_faces(idx[:-1, :], idx[1:, :], permittivity[:-1, :], permittivity[1:, :])
    add_faces(idx[1:, :], idx[:-1, :], permittivity[1:, :], permittivity[:-1, :])
    # y-direction faces
    add_faces(idx[:, :-1], idx[:, 1:], permittivity[:, :-1], permittivity[:, 1:])
    add_faces(idx[:, 1:], idx[:, :-1], permittivity[:, 1:], permittivity[:, :-1])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    dmask = dirichlet_mask.ravel()
    keep = ~dmask[rows]
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    diag[dmask] = 1.0

    A = sp.coo_matrix(
        (np.concatenate([vals, diag]),
         (np.concatenate([rows, np.arange(n)]),
          np.concatenate([cols, np.arange(n)]))),
        shape=(n, n)).tocsr()

    b = rhs.ravel().copy()
    b[dmask] = dirichlet_values.ravel()[dmask]

    v = spla.spsolve(A, b)
    resid = np.abs(A @ v - b).max()
    scale = max(np.abs(b).max(), 1e-300)
    if resid > RESIDUAL_RTOL * scale and resid > 1e-14:
        raise RuntimeError(
            f"Poisson residual {resid:.3e} exceeds {RESIDUAL_RTOL:.0e} of RHS norm {scale:.3e}")
    return v.reshape(nx, ny)


def device_boundary(grid: Grid, vg: float, vd: float):
    """Dirichlet mask/values for the device: gate nodes and contact columns.

    Gate nodes sit at vg minus the metal workfunction offset. The source
    column is pinned at 0 V, the bulk-neutrality potential for the contact
    doping once the contact Fermi level is referenced to it (see negf), and
    the drain column at +vd so contact bands follow the drain Fermi level.
    """
    mask = grid.gate_mask.copy()
    values = np.zeros((grid.nx, grid.ny))
    values[grid.gate_mask] = vg - grid.spec.gate_workfunction_offset
    mask[0, :] = True
    values[0, :] = 0.0
    mask[-1, :] = True
    values[-1, :] = vd
    return mask, values


def charge_rhs(grid: Grid, electron_density: Field) -> np.ndarray:
    """-q (N_D - n) / eps0 in V/nm^2 from cm^-3 inputs."""
    rho_nm3 = (grid.donor_density - electron_density.values) * _CM3_TO_NM3
    return -_Q_OVER_EPS0 * rho_nm3


def solve_poisson(grid: Grid, electron_density: Field, vg: float, vd: float) -> Field:
    """Potential for a fixed electron density under device boundary conditions."""
    if electron_density.quantity != ELECTRON_DENSITY:
        raise ValueError("density field must be tagged as electron density")
    if not electron_density.matches(grid):
        raise ValueError("density shape does not match grid")
    mask, values = device_boundary(grid, vg, vd)
    rhs = charge_rhs(grid, electron_density)
    v = core_solve(grid.permittivity, rhs, mask, values, grid.spacing)
    return potential_field(v)


def initial_potential(grid: Grid, vg: float, vd: float) -> Field:
    """Charge-free (Laplace) solution under device boundary conditions.

    This is the cold-start potential of the self-consistent loop.
    """
    mask, values = device_boundary(grid, vg, vd)
    rhs = np.zeros((grid.nx, grid.ny))
    v = core_solve(grid.permittivity, rhs, mask, values, grid.spacing)
    return potential_field(v)
