"""Physical constants (CODATA 2018) and unit helpers.

Internal unit conventions:
  lengths   nm        (converted to m only where SI is unavoidable)
  energies  eV
  potential V
  densities cm^-3
"""

Q_E = 1.602176634e-19        # elementary charge, C
HBAR = 1.054571817e-34       # reduced Planck constant, J s
M_E = 9.1093837015e-31       # electron rest mass, kg
KB_EV = 8.617333262e-5       # Boltzmann constant, eV/K
EPS0_F_PER_NM = 8.8541878128e-21   # vacuum permittivity, F/nm
H_PLANCK = 6.62607015e-34    # Planck constant, J s

EPS_SILICON = 11.7           # relative permittivity of Si
EPS_OXIDE = 3.9              # relative permittivity of SiO2

# 2 e^2 / h, conductance quantum with spin, in siemens
G0_SIEMENS = 2.0 * Q_E**2 / H_PLANCK


def hopping_ev(mass_ratio: float, spacing_nm: float) -> float:
    """Tight-binding hopping t = hbar^2 / (2 m* a^2) in eV."""
    a = spacing_nm * 1e-9
    return HBAR**2 / (2.0 * mass_ratio * M_E * a * a) / Q_E
