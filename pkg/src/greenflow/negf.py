"""Ballistic effective-mass NEGF on the 2D device grid.

The Hamiltonian is the square-lattice discretization of a single parabolic
band restricted to silicon nodes (hard wall at the oxide). Contacts are
semi-infinite repetitions of the edge slices; their self-energies follow
from the per-mode analytic surface Green's function. The retarded Green's
function diagonal, lead spectral densities and transmission come from a
block-tridiagonal forward/backward recursion, vectorized over energy.

Energies are in eV with the conduction band edge at 0; the electrostatic
potential enters the onsite terms as -q V.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .constants import G0_SIEMENS, KB_EV, hopping_ev
from .device import Grid
from .poisson import POTENTIAL, Field, density_field

# Contact Fermi level (eV above the band edge) that makes the discretized
# bulk band neutral at the 1e20 cm^-3 contact doping of the default device.
# Computed once with contact_fermi_level() and frozen; the acceptance suite
# re-derives it by bisection.
DEFAULT_CONTACT_FERMI_EV = 1.4029451699


@dataclass(frozen=True)
class NegfConfig:
    """Numerical knobs of the transport solve."""

    eta: float = 1e-6              # retarded broadening, eV
    n_energy: int = 400            # uniform trapezoid points
    fermi_level: float = DEFAULT_CONTACT_FERMI_EV   # source contact, eV
    band_margin: float = 0.05      # integration starts this far below the band, eV
    # 10 kT covers the occupied spectrum (the density requirement); the wider
    # default also resolves thermionic tails over gate-induced barriers so
    # deep-subthreshold currents are not window-limited.
    fermi_tail_kt: float = 25.0


@dataclass(frozen=True)
class Hamiltonian:
    """Block-tridiagonal device Hamiltonian.

    Slice blocks are tridiagonal in the confinement direction; all coupling
    blocks equal -t times the identity (uniform grid, uniform mass).
    """

    onsite: np.ndarray     # (n_slices, n_sites) diagonal entries, eV
    t: float               # hopping, eV

    @property
    def n_slices(self) -> int:
        return self.onsite.shape[0]

    @property
    def n_sites(self) -> int:
        return self.onsite.shape[1]

    def block(self, i: int) -> np.ndarray:
        """Dense slice block H_i."""
        m = self.n_sites
        h = np.diag(self.onsite[i].astype(np.float64))
        off = -self.t * np.ones(m - 1)
        h += np.diag(off, 1) + np.diag(off, -1)
        return h

    def blocks(self) -> np.ndarray:
        """All slice blocks as an (n_slices, m, m) stack."""
        return np.stack([self.block(i) for i in range(self.n_slices)])


@dataclass(frozen=True)
class EnergyGrid:
    """Uniform energy mesh with trapezoid weights."""

    e_min: float
    e_max: float
    n_points: int

    def __post_init__(self):
        if not self.e_min < self.e_max:
            raise ValueError("e_min must be below e_max")
        if self.n_points < 2:
            raise ValueError("need at least two energy points")

    @property
    def energies(self) -> np.ndarray:
        return np.linspace(self.e_min, self.e_max, self.n_points)

    @property
    def weights(self) -> np.ndarray:
        h = (self.e_max - self.e_min) / (self.n_points - 1)
        w = np.full(self.n_points, h)
        w[0] = w[-1] = 0.5 * h
        return w


@dataclass(frozen=True)
class GreensState:
    """Per-energy NEGF products."""

    energy: float
    g_diag: np.ndarray        # (n_slices, m, m) complex retarded diagonal blocks
    sigma_l: np.ndarray       # (m, m) complex
    sigma_r: np.ndarray
    gamma_l: np.ndarray
    gamma_r: np.ndarray
    a_l: np.ndarray           # (n_slices, m) lead-injected spectral density diag
    a_r: np.ndarray
    transmission: float


def assemble_hamiltonian(grid: Grid, potential: Field) -> Hamiltonian:
    """Onsite 4t - qV on silicon nodes, hopping t; oxide is a hard wall."""
    if potential.quantity != POTENTIAL:
        raise ValueError("expected a potential field")
    if not potential.matches(grid):
        raise ValueError("potential shape does not match grid")
    t = hopping_ev(grid.spec.effective_mass_ratio, grid.spacing)
    v_si = potential.values[:, grid.silicon_rows]
    onsite = 4.0 * t - v_si
    return Hamiltonian(onsite=np.ascontiguousarray(onsite), t=t)


def fermi(e, mu: float, temperature: float):
    """Fermi-Dirac occupation, numerically stable for large arguments."""
    kt = KB_EV * max(temperature, 1e-12)
    x = np.clip((np.asarray(e) - mu) / kt, -700.0, 700.0)
    return 1.0 / (1.0 + np.exp(x))


def _surface_g_modes(d: np.ndarray, t: float, z: np.ndarray) -> np.ndarray:
    """Per-mode surface Green's function of a semi-infinite 1D chain.

    Solves t^2 g^2 - (z - d) g + 1 = 0 and keeps the decaying root
    (|g t| <= 1); for real energies inside the band this is -exp(ika)/t
    with z - d = -2 t cos(ka), the retarded branch.
    """
    x = z[..., None] - d          # (..., n_modes)
    s = np.sqrt(x * x - 4.0 * t * t + 0j)
    g1 = (x - s) / (2.0 * t * t)
    g2 = (x + s) / (2.0 * t * t)
    return np.where(np.abs(g1) <= np.abs(g2), g1, g2)


def lead_self_energy(h_edge: np.ndarray, t: float, e: float, eta: float = 0.0) -> np.ndarray:
    """Self-energy of a semi-infinite lead repeating the edge slice.

    Diagonalizes the edge block into transverse modes and applies the 1D
    analytic surface result per mode; Sigma = t^2 U g U^T because the
    coupling is -t times the identity.
    """
    sig = lead_self_energy_batch(h_edge, t, np.array([e]), eta)
    return sig[0]


def lead_self_energy_batch(h_edge: np.ndarray, t: float,
                           energies: np.ndarray, eta: float = 0.0) -> np.ndarray:
    d, u = np.linalg.eigh(h_edge)
    z = np.asarray(energies, dtype=np.complex128) + 1j * eta
    g = _surface_g_modes(d, t, z)               # (nE, m)
    # Sigma = U diag(t^2 g) U^T
    return np.einsum("am,em,bm->eab", u, t * t * g, u)


def lead_band_bottom(h_edge: np.ndarray, t: float) -> float:
    """Lowest propagating energy of the semi-infinite lead."""
    d = np.linalg.eigvalsh(h_edge)
    return float(d.min() - 2.0 * t)


def propagating_modes(h_edge: np.ndarray, t: float, e: float) -> int:
    """Number of lead modes whose band contains energy e."""
    d = np.linalg.eigvalsh(h_edge)
    return int(np.sum(np.abs(e - d) < 2.0 * t))


class SpectralBatch(Sequence):
    """Energy-resolved NEGF products for a whole energy grid.

    Behaves as a sequence of GreensState; keeps the underlying arrays
    exposed for the density and current integrals.
    """

    def __init__(self, energies, g_diag, sigma_l, sigma_r, a_l, a_r, transmission):
        self.energies = energies          # (nE,)
        self.g_diag = g_diag              # (nE, n_slices, m, m)
        self.sigma_l = sigma_l            # (nE, m, m)
        self.sigma_r = sigma_r
        self.a_l = a_l                    # (nE, n_slices, m)
        self.a_r = a_r
        self.transmission = transmission  # (nE,)

    def __len__(self):
        return len(self.energies)

    def __getitem__(self, k):
        if isinstance(k, slice):
            raise TypeError("slicing not supported")
        sl, sr = self.sigma_l[k], self.sigma_r[k]
        return GreensState(
            energy=float(self.energies[k]),
            g_diag=self.g_diag[k],
            sigma_l=sl, sigma_r=sr,
            gamma_l=1j * (sl - sl.conj().T),
            gamma_r=1j * (sr - sr.conj().T),
            a_l=self.a_l[k], a_r=self.a_r[k],
            transmission=float(self.transmission[k]),
        )


def _inv_checked(a: np.ndarray, slice_idx: int, energies: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        dets = np.linalg.det(a.reshape(-1, *a.shape[-2:]))
        bad = int(np.argmin(np.abs(dets)))
        e_bad = energies[bad] if len(energies) > bad else float("nan")
        raise RuntimeError(
            f"singular pivot block at slice {slice_idx}, energy {e_bad:.6f} eV") from None


def spectral_solve(h: Hamiltonian, energies: np.ndarray, eta: float,
                   sigma_l: np.ndarray | None = None,
                   sigma_r: np.ndarray | None = None) -> SpectralBatch:
    """Recursive Green's function sweep for every energy at once.

    Self-energies default to those of semi-infinite leads repeating the
    edge slices; explicit (nE, m, m) stacks override them.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    energies = np.atleast_1d(np.asarray(energies, dtype=np.float64))
    n, m = h.n_slices, h.n_sites
    t = h.t
    t2 = t * t

    h_blocks = h.blocks()
    if sigma_l is None:
        sigma_l = lead_self_energy_batch(h_blocks[0], t, energies, eta)
    if sigma_r is None:
        sigma_r = lead_self_energy_batch(h_blocks[-1], t, energies, eta)

    z = (energies + 1j * eta)[:, None, None] * np.eye(m)
    a_diag = z[None, ...] - h_blocks[:, None, :, :]   # (n, nE, m, m)
    a_diag = np.ascontiguousarray(np.swapaxes(a_diag, 0, 1))  # (nE, n, m, m)
    a_diag[:, 0] -= sigma_l
    a_diag[:, -1] -= sigma_r

    # left-connected forward sweep
    g_left = np.empty_like(a_diag)
    g_left[:, 0] = _inv_checked(a_diag[:, 0], 0, energies)
    for i in range(1, n):
        g_left[:, i] = _inv_checked(a_diag[:, i] - t2 * g_left[:, i - 1], i, energies)

    # right-connected backward sweep
    g_right = np.empty_like(a_diag)
    g_right[:, -1] = _inv_checked(a_diag[:, -1], n - 1, energies)
    for i in range(n - 2, -1, -1):
        g_right[:, i] = _inv_checked(a_diag[:, i] - t2 * g_right[:, i + 1], i, energies)

    # full diagonal blocks from the left-connected sweep
    g_diag = np.empty_like(a_diag)
    g_diag[:, -1] = g_left[:, -1]
    for i in range(n - 2, -1, -1):
        g_diag[:, i] = g_left[:, i] + t2 * (g_left[:, i] @ g_diag[:, i + 1] @ g_left[:, i])

    # first and last block columns
    gamma_l = 1j * (sigma_l - np.conj(np.swapaxes(sigma_l, -1, -2)))
    gamma_r = 1j * (sigma_r - np.conj(np.swapaxes(sigma_r, -1, -2)))

    # G_{i,0} going down folds in slices ahead: right-connected recursion
    col0 = np.empty_like(a_diag)
    col0[:, 0] = g_diag[:, 0]
    for i in range(1, n):
        col0[:, i] = -t * (g_right[:, i] @ col0[:, i - 1])

    # G_{i,n-1} going up folds in slices behind: left-connected recursion
    coln = np.empty_like(a_diag)
    coln[:, -1] = g_diag[:, -1]
    for i in range(n - 2, -1, -1):
        coln[:, i] = -t * (g_left[:, i] @ coln[:, i + 1])

    # A_L = G Gamma_L G^dagger restricted to slice diagonals
    gl_col = col0 @ gamma_l[:, None, :, :]
    a_l = np.einsum("neab,neab->nea", gl_col, col0.conj()).real
    gr_col = coln @ gamma_r[:, None, :, :]
    a_r = np.einsum("neab,neab->nea", gr_col, coln.conj()).real

    # T = Tr(Gamma_L G_{0,n-1} Gamma_R G_{0,n-1}^dagger)
    g0n = coln[:, 0]
    transmission = np.einsum("eab,ebc,ecd,ead->e",
                             gamma_l, g0n, gamma_r, g0n.conj()).real

    return SpectralBatch(energies, g_diag, sigma_l, sigma_r, a_l, a_r, transmission)


def rgf_diagonal(h: Hamiltonian, sigma_l: np.ndarray, sigma_r: np.ndarray,
                 e: float, eta: float = 1e-6) -> GreensState:
    """Single-energy retarded solve with caller-supplied self-energies."""
    batch = spectral_solve(h, np.array([e]), eta,
                           sigma_l=np.asarray(sigma_l, dtype=np.complex128)[None],
                           sigma_r=np.asarray(sigma_r, dtype=np.complex128)[None])
    return batch[0]


def default_energy_grid(h: Hamiltonian, mu_l: float, mu_r: float,
                        temperature: float, cfg: NegfConfig) -> EnergyGrid:
    """Span from below the lowest lead band bottom up past the Fermi tails."""
    bottom = min(lead_band_bottom(h.block(0), h.t),
                 lead_band_bottom(h.block(h.n_slices - 1), h.t))
    e_min = bottom - cfg.band_margin
    e_max = max(mu_l, mu_r) + cfg.fermi_tail_kt * KB_EV * temperature
    return EnergyGrid(e_min, e_max, cfg.n_energy)


def carrier_density(grid: Grid, states, mu_l: float, mu_r: float,
                    temperature: float, egrid: EnergyGrid) -> Field:
    """Electron density field from lead-resolved spectral densities.

    n = 2 * integral dE/(2 pi) [A_L f(E - mu_L) + A_R f(E - mu_R)] per site,
    converted to cm^-3 with the site cell volume a*a*W.
    """
    if len(states) == 0:
        raise ValueError("empty energy grid")
    if isinstance(states, SpectralBatch):
        energies, a_l, a_r = states.energies, states.a_l, states.a_r
    else:
        energies = np.array([s.energy for s in states])
        a_l = np.stack([s.a_l for s in states])
        a_r = np.stack([s.a_r for s in states])
    if len(states) != egrid.n_points or not np.allclose(energies, egrid.energies):
        raise ValueError("states do not match the energy grid")

    f_l = fermi(energies, mu_l, temperature)
    f_r = fermi(energies, mu_r, temperature)
    w = egrid.weights
    # deterministic ordered reduction over the energy axis
    occ = np.tensordot(w * f_l, a_l, axes=(0, 0)) \
        + np.tensordot(w * f_r, a_r, axes=(0, 0))
    occ = np.maximum(occ, 0.0) / np.pi   # spin 2 / (2 pi)

    spec = grid.spec
    a_m = grid.spacing * 1e-9
    cell_volume_m3 = a_m * a_m * (spec.width_nm * 1e-9)
    dens_cm3 = occ / cell_volume_m3 * 1e-6

    field = np.zeros((grid.nx, grid.ny))
    field[:, grid.silicon_rows] = dens_cm3
    return density_field(field)


def landauer_current(transmission: np.ndarray, mu_l: float, mu_r: float,
                     temperature: float, egrid: EnergyGrid) -> float:
    """Two-terminal current I = (2q/h) integral T(E) (f_L - f_R) dE, in A.

    The width of the sheet enters the simulation only through the density
    normalization; the current is that of the simulated 2D plane.
    """
    e = egrid.energies
    df = fermi(e, mu_l, temperature) - fermi(e, mu_r, temperature)
    integral_ev = float(np.dot(egrid.weights, np.asarray(transmission) * df))
    return G0_SIEMENS * integral_ev


def bulk_line_density(mu: float, t: float, mode_bottoms: np.ndarray,
                      temperature: float, spacing_m: float, n_k: int = 4001) -> float:
    """Electrons per meter of the infinite wire at chemical potential mu."""
    ka = np.linspace(0.0, np.pi, n_k)
    lam = 0.0
    for eb in mode_bottoms:
        disp = eb + 2.0 * t * (1.0 - np.cos(ka))
        f = fermi(disp, mu, temperature)
        # spin 2, +-k symmetric: 2 * 2 * int_0^pi d(ka)/(2 pi a) f
        lam += 2.0 * np.trapezoid(f, ka) / (np.pi * spacing_m)
    return lam


def contact_fermi_level(grid: Grid, temperature: float | None = None,
                        tol: float = 1e-10) -> float:
    """Fermi level that makes the contact cross-section bulk-neutral.

    Bisects the line density of the infinite wire built from the same
    discretized transverse band against the source/drain donor density.
    """
    spec = grid.spec
    temperature = spec.temperature if temperature is None else temperature
    t = hopping_ev(spec.effective_mass_ratio, grid.spacing)
    m = grid.n_silicon_rows
    q_m = np.arange(1, m + 1) * np.pi / (m + 1)
    bottoms = 2.0 * t * (1.0 - np.cos(q_m))

    a_m = grid.spacing * 1e-9
    area = m * a_m * (spec.width_nm * 1e-9)     # contact cross-section, m^2
    target = spec.sd_doping * 1e6 * area        # electrons per meter

    lo, hi = -1.0, 4.0 * t + 2.0
    while bulk_line_density(hi, t, bottoms, temperature, a_m) < target:
        hi += 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bulk_line_density(mid, t, bottoms, temperature, a_m) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
