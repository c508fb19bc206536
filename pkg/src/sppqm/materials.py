"""Dispersion models of the dielectric / negative-index metamaterial pair.

Everything in the package is SI with angular frequencies in rad/s. The
metamaterial follows the Drude form

    eps2(w) = eps_inf - w_e**2 / (w (w + i gamma_e))
    mu2(w)  = mu_inf  - w_mu**2 / w**2

and the free wavelength in the dielectric is lambda_o = 2 pi c / (w sqrt(eps1 mu1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, NoSolutionError, UnsupportedUnitError

# CODATA 2018 exact / recommended values
SPEED_OF_LIGHT = 2.99792458e8  # m/s
ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOHR_RADIUS = 5.29177210903e-11  # m
HBAR = 1.054571817e-34  # J s
VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m


@dataclass(frozen=True)
class DrudeModel:
    """Drude parameters of the metamaterial (angular frequencies in rad/s)."""

    eps_inf: float = 2.0
    omega_e: float = 1.37e16
    gamma_e: float = 0.0
    mu_inf: float = 2.0
    omega_mu: float = 1.37e16 / 1.67

    def __post_init__(self):
        if not (self.omega_e > 0 and self.omega_mu > 0):
            raise DomainError("omega_e and omega_mu must be positive")
        if self.gamma_e < 0:
            raise DomainError("gamma_e must be non-negative")
        if not (self.eps_inf > 0 and self.mu_inf > 0):
            raise DomainError("eps_inf and mu_inf must be positive")


@dataclass(frozen=True)
class DielectricParams:
    eps1: float = 1.31
    mu1: float = 1.0

    def __post_init__(self):
        if not (self.eps1 > 0 and self.mu1 > 0):
            raise DomainError("dielectric eps1 and mu1 must be strictly positive")

    @property
    def index(self) -> float:
        return math.sqrt(self.eps1 * self.mu1)


@dataclass(frozen=True)
class MaterialPoint:
    """Complex (eps2, mu2) of the metamaterial at one frequency."""

    eps2: complex
    mu2: complex = 0.0

    @property
    def is_nimm(self) -> bool:
        """True in the negative-permittivity, lossy operating regime."""
        e = complex(self.eps2)
        return e.real < 0 and e.imag > 0


def eval_nimm(model: DrudeModel, omega):
    """Evaluate the Drude permittivity and permeability at ``omega``.

    Scalars give a :class:`MaterialPoint`; arrays give a tuple
    ``(eps2, mu2)`` of arrays with the same shape.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(~(w > 0)):
        raise DomainError("omega must be strictly positive")
    eps2 = model.eps_inf - model.omega_e**2 / (w * (w + 1j * model.gamma_e))
    mu2 = model.mu_inf - model.omega_mu**2 / w**2
    if w.ndim == 0:
        return MaterialPoint(complex(eps2), complex(float(mu2)))
    return eps2, mu2.astype(complex)


def mu_zero_frequency(model: DrudeModel) -> float:
    """Frequency where the Drude permeability crosses zero."""
    return model.omega_mu / math.sqrt(model.mu_inf)


def epsilon_match_frequency(model: DrudeModel, eps1: float, bracket=None) -> float:
    """Frequency where Re eps2 = -eps1, i.e. |Re eps2| matches the dielectric.

    Re eps2 is monotone in omega, so a sign change on ``bracket`` (default
    ``omega_e * [1e-6, 1e3]``) isolates the single root.
    """
    if eps1 < 0:
        raise DomainError("eps1 must be non-negative")

    def f(w):
        return (model.eps_inf - model.omega_e**2 / (w * (w + 1j * model.gamma_e))).real + eps1

    lo, hi = bracket if bracket is not None else (1e-6 * model.omega_e, 1e3 * model.omega_e)
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return float(lo)
    if fhi == 0.0:
        return float(hi)
    if np.sign(flo) == np.sign(fhi):
        raise NoSolutionError(
            f"Re eps2 + eps1 does not change sign on [{lo:.3e}, {hi:.3e}] rad/s"
        )
    return float(brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


# ---------------------------------------------------------------------------
# unit conversion
# ---------------------------------------------------------------------------

_DENSITY = {"m^-3": 1.0, "cm^-3": 1e6}
_DIPOLE = {"C*m": 1.0, "e*a0": ELEMENTARY_CHARGE * BOHR_RADIUS, "debye": 1e-21 / SPEED_OF_LIGHT}
_LENGTH = {"m": 1.0, "nm": 1e-9, "um": 1e-6}
_FREQ = {"rad/s": 1.0}

_ALIASES = {
    "m-3": "m^-3", "1/m3": "m^-3", "cm-3": "cm^-3", "1/cm3": "cm^-3",
    "ea0": "e*a0", "e a0": "e*a0", "C m": "C*m", "Cm": "C*m", "D": "debye",
    "μm": "um", "rad s-1": "rad/s",
}


def _canon(unit: str) -> str:
    return _ALIASES.get(unit, unit)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def convert_units(value, from_unit: str, to_unit: str, *, eps1: float = 1.0, mu1: float = 1.0):
    """Convert ``value`` between supported units.

    Supported families are number density (``m^-3``, ``cm^-3``), dipole
    moment (``C*m``, ``e*a0``, ``debye``) and free wavelength in the
    dielectric (``m``, ``nm``, ``um``) <-> angular frequency (``rad/s``);
    the last family needs the dielectric's ``eps1`` and ``mu1``.
    """
    a, b = _canon(from_unit), _canon(to_unit)
    for table in (_DENSITY, _DIPOLE, _LENGTH, _FREQ):
        if a in table and b in table:
            return value * (table[a] / table[b])
    n = math.sqrt(eps1 * mu1)
    if a in _LENGTH and b in _FREQ:
        lam = np.asarray(value, dtype=float) * _LENGTH[a]
        return _scalar(2 * math.pi * SPEED_OF_LIGHT / (lam * n) / _FREQ[b])
    if a in _FREQ and b in _LENGTH:
        w = np.asarray(value, dtype=float) * _FREQ[a]
        return _scalar(2 * math.pi * SPEED_OF_LIGHT / (w * n) / _LENGTH[b])
    raise UnsupportedUnitError(f"cannot convert {from_unit!r} to {to_unit!r}")


def omega_from_lambda(lambda_o: float, dielectric: DielectricParams) -> float:
    """Angular frequency whose wavelength in the dielectric is ``lambda_o``."""
    return 2 * math.pi * SPEED_OF_LIGHT / (lambda_o * dielectric.index)


def lambda_from_omega(omega: float, dielectric: DielectricParams) -> float:
    return 2 * math.pi * SPEED_OF_LIGHT / (omega * dielectric.index)
