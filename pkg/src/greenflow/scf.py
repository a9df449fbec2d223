"""Self-consistent Poisson-NEGF loop.

One iteration = NEGF density from the current potential, Poisson potential
from that density, then linear mixing V <- V_old + alpha (V_new - V_old).
Iterations count NEGF evaluations. Convergence is max-node |Delta V| below
tolerance after mixing.
"""

from dataclasses import dataclass, field

import numpy as np

from .device import Grid
from .negf import (NegfConfig, assemble_hamiltonian, carrier_density,
                   default_energy_grid, landauer_current, spectral_solve)
from .poisson import Field, device_boundary, initial_potential, solve_poisson


@dataclass(frozen=True)
class ScfConfig:
    mixing_alpha: float = 0.3
    tol_potential: float = 1e-4        # V, max-node criterion
    max_iterations: int = 200
    record_snapshots: bool = False
    negf: NegfConfig = NegfConfig()

    def validate(self) -> None:
        if not 0.0 < self.mixing_alpha <= 1.0:
            raise ValueError("mixing_alpha must be in (0, 1]")
        if self.tol_potential <= 0:
            raise ValueError("tol_potential must be positive")
        if self.max_iterations < 2:
            raise ValueError("max_iterations must be at least 2")


@dataclass
class ScfResult:
    converged: bool
    iterations: int
    potential: Field               # mixed, final
    density: Field                 # from the last NEGF evaluation
    current: float                 # A, from the last NEGF evaluation
    vg: float
    vd: float
    residual_trace: list[float] = field(default_factory=list)
    snapshots: dict[int, tuple[Field, Field]] = field(default_factory=dict)


def run_scf(grid: Grid, vg: float, vd: float,
            init: tuple[Field, Field] | None = None,
            cfg: ScfConfig = ScfConfig()) -> ScfResult:
    """Run the loop from a cold (charge-free Poisson) or supplied start.

    A supplied init is (potential, density); the loop starts with an NEGF
    solve on the supplied potential, so the density only documents the
    predictor state that produced it.
    """
    cfg.validate()
    if init is not None:
        v_pot, v_den = init
        if not (v_pot.matches(grid) and v_den.matches(grid)):
            raise ValueError("init field shapes do not match grid")
        # Dirichlet nodes are known exactly; a supplied guess must not drag
        # stale boundary values through the mixing tail.
        mask, values = device_boundary(grid, vg, vd)
        pinned = v_pot.values.copy()
        pinned[mask] = values[mask]
        potential = Field(pinned, v_pot.quantity)
    else:
        potential = initial_potential(grid, vg, vd)

    temperature = grid.spec.temperature
    mu_l = cfg.negf.fermi_level
    mu_r = mu_l - vd

    converged = False
    iterations = 0
    density = None
    current = 0.0
    residuals: list[float] = []
    snapshots: dict[int, tuple[Field, Field]] = {}

    for k in range(1, cfg.max_iterations + 1):
        iterations = k
        h = assemble_hamiltonian(grid, potential)
        egrid = default_energy_grid(h, mu_l, mu_r, temperature, cfg.negf)
        batch = spectral_solve(h, egrid.energies, cfg.negf.eta)
        density = carrier_density(grid, batch, mu_l, mu_r, temperature, egrid)
        current = landauer_current(batch.transmission, mu_l, mu_r, temperature, egrid)

        v_new = solve_poisson(grid, density, vg, vd)
        if cfg.record_snapshots:
            snapshots[k] = (v_new, density)

        mixed = potential.values + cfg.mixing_alpha * (v_new.values - potential.values)
        delta = float(np.abs(mixed - potential.values).max())
        residuals.append(delta)
        potential = Field(mixed, potential.quantity)
        if delta < cfg.tol_potential:
            converged = True
            break

    return ScfResult(converged=converged, iterations=iterations,
                     potential=potential, density=density, current=current,
                     vg=vg, vd=vd, residual_trace=residuals,
                     snapshots=snapshots)


def first_iteration(grid: Grid, vg: float, vd: float,
                    cfg: ScfConfig = ScfConfig()) -> ScfResult:
    """Exactly one NEGF evaluation plus the Poisson solve it feeds.

    This is the warm-start bootstrap: its snapshot 1 is identical to the
    first snapshot of a full cold run with the same configuration.
    """
    cfg.validate()
    potential = initial_potential(grid, vg, vd)
    temperature = grid.spec.temperature
    mu_l = cfg.negf.fermi_level
    mu_r = mu_l - vd

    h = assemble_hamiltonian(grid, potential)
    egrid = default_energy_grid(h, mu_l, mu_r, temperature, cfg.negf)
    batch = spectral_solve(h, egrid.energies, cfg.negf.eta)
    density = carrier_density(grid, batch, mu_l, mu_r, temperature, egrid)
    current = landauer_current(batch.transmission, mu_l, mu_r, temperature, egrid)
    v_new = solve_poisson(grid, density, vg, vd)
    return ScfResult(converged=False, iterations=1, potential=v_new,
                     density=density, current=current, vg=vg, vd=vd,
                     residual_trace=[float(np.abs(v_new.values - potential.values).max())],
                     snapshots={1: (v_new, density)})


def record_snapshot(result: ScfResult, k) -> tuple[Field, Field]:
    """Stored (potential, density) at iteration k; k may be "final".

    Snapshot 1 is the post-first-NEGF state: the unmixed Poisson output and
    the density that produced it. The final snapshot is the converged pair.
    """
    if not result.snapshots:
        raise ValueError("snapshot recording was not enabled for this run")
    if k == "final" or k == result.iterations:
        return result.potential, result.density
    if not isinstance(k, int) or k not in result.snapshots:
        raise KeyError(f"no snapshot recorded for iteration {k!r}")
    return result.snapshots[k]
