"""Pinned physical constants (CODATA 2018 exact/recommended values).

Values are frozen here rather than taken from scipy.constants so that results
are reproducible even if the installed scipy ships a newer CODATA set.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    c: float = 299792458.0              # m/s, exact
    h: float = 6.62607015e-34           # J s, exact
    hbar: float = 1.054571817e-34       # J s, h / 2 pi
    e: float = 1.602176634e-19          # C, exact
    eps0: float = 8.8541878128e-12      # F/m
    a0: float = 5.29177210903e-11       # m, Bohr radius
    hartree: float = 4.3597447222071e-18  # J

    @property
    def au_dipole(self) -> float:
        """Atomic unit of electric dipole moment, C m (e * a0)."""
        return self.e * self.a0

    @property
    def au_polarizability(self) -> float:
        """Atomic unit of polarizability, C^2 m^2 / J (e^2 a0^2 / E_h)."""
        return self.e**2 * self.a0**2 / self.hartree

    @property
    def au_angular_frequency(self) -> float:
        """Atomic unit of angular frequency, rad/s (E_h / hbar)."""
        return self.hartree / self.hbar


CODATA2018 = PhysicalConstants()
