"""Spectral model of the Raman-echo memory on the SPP interface.

Atoms fill the layer 0 < z < z_o. The control field's evanescent profile
gives every depth its own Raman resonance (Stark shift), and the ensemble
response to a weak probe is summarised by the complex effective absorption

    alpha_eff(nu) = alpha_p(nu) - 2 i sigma_p,

where A_nu(X) = exp[(i sigma_p - alpha_p(nu)/2) X] A_nu(0). ``alpha_numeric``
and ``susceptibility_sigma`` integrate the depth/detuning averages by
adaptive quadrature; ``alpha_closed`` is the homogeneous closed form and is
checked against them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, DomainError, NumericError, SingularityError
from .materials import HBAR, SPEED_OF_LIGHT, VACUUM_PERMITTIVITY
from .sppmode import SppMode, parallel_map

QUAD_RTOL = 1e-10
DETUNING_CUTOFF = 6.0  # Gaussian widths kept on each side
DEFAULT_OD_THRESHOLD = 3.0

# Coupling normalisation. "gaussian" reads the 2 pi n L_y |d.E|^2/(v hbar^2)
# coupling with the Gaussian-unit mode amplitude E_o^2 = 2 pi hbar w/(L_y L_z)
# and converts to SI (d^2 -> d^2 / (4 pi eps_vac)); "si_literal" keeps
# E_o^2 = hbar w / (2 pi eps_vac L_y L_z) as printed. They differ by pi.
CHI_CONVENTIONS = {"gaussian": math.pi, "si_literal": 1.0}
DEFAULT_CHI_CONVENTION = "gaussian"


@dataclass(frozen=True)
class Homogeneous:
    """All atoms share Delta21 = Delta31 = 0."""

    @property
    def is_homogeneous(self) -> bool:
        return True


@dataclass(frozen=True)
class GaussianBroadening:
    """Independent Gaussian spreads of Delta21 and Delta31 (rad/s, std. dev.).

    A zero width collapses that axis to a delta function.
    """

    sigma21: float = 0.0
    sigma31: float = 0.0

    def __post_init__(self):
        if self.sigma21 < 0 or self.sigma31 < 0:
            raise DomainError("broadening widths must be non-negative")

    @property
    def is_homogeneous(self) -> bool:
        return self.sigma21 == 0 and self.sigma31 == 0

    def density(self, d21, d31):
        """Joint density G(Delta21, Delta31) for the non-degenerate axes."""
        g = 1.0
        if self.sigma21 > 0:
            g = g * np.exp(-0.5 * (d21 / self.sigma21) ** 2) / (math.sqrt(2 * math.pi) * self.sigma21)
        if self.sigma31 > 0:
            g = g * np.exp(-0.5 * (d31 / self.sigma31) ** 2) / (math.sqrt(2 * math.pi) * self.sigma31)
        return g


Broadening = Union[Homogeneous, GaussianBroadening]


@dataclass(frozen=True)
class RamanEnsemble:
    n_o: float  # atoms / m^3
    d13: float  # C m
    gamma21: float = 0.0  # rad/s
    gamma31: float = 0.0  # rad/s
    z_o: float = 0.0  # m
    broadening: Broadening = field(default_factory=Homogeneous)

    def __post_init__(self):
        if self.n_o < 0 or self.z_o < 0:
            raise DomainError("n_o and z_o must be non-negative")
        if self.gamma21 < 0 or self.gamma31 < 0:
            raise DomainError("decay rates must be non-negative")

    @property
    def homogeneous(self) -> bool:
        return self.broadening.is_homogeneous

    def with_thickness(self, z_o: float) -> "RamanEnsemble":
        return replace(self, z_o=z_o)


@dataclass(frozen=True)
class DriveConfig:
    omega_cp_rabi: complex  # control Rabi frequency at the interface, rad/s
    delta_p: float  # omega_31 - omega_p
    delta_pR: float  # omega_21 - omega_cp + omega_p
    xi1_p: float  # probe confinement, m
    xi1_cp: float  # control confinement, m

    def __post_init__(self):
        if not (self.xi1_p > 0 and self.xi1_cp > 0):
            raise DomainError("confinements must be positive")

    @property
    def stark_width(self) -> float:
        """Maximum Stark shift |Omega|^2 / Delta_p at the interface."""
        return abs(self.omega_cp_rabi) ** 2 / abs(self.delta_p)


@dataclass
class SpectralResponse:
    nu_grid: np.ndarray
    alpha_eff: np.ndarray
    optical_density: np.ndarray
    L_x: float

    @classmethod
    def from_alpha(cls, nu, alpha_eff, L_x) -> "SpectralResponse":
        nu = np.asarray(nu, dtype=float)
        alpha_eff = np.asarray(alpha_eff, dtype=complex)
        if nu.shape != alpha_eff.shape:
            raise ConfigurationError("frequency grid and alpha must have equal length")
        return cls(nu, alpha_eff, alpha_eff.real * L_x, L_x)


# ---------------------------------------------------------------------------
# coupling and single-atom quantities
# ---------------------------------------------------------------------------

def coupling_chi(mode: SppMode, ensemble: RamanEnsemble, omega_p: Optional[float] = None,
                 convention: str = DEFAULT_CHI_CONVENTION) -> float:
    """Probe coupling constant chi_p in 1/(m^2 s).

    chi_p = c_conv n_o |d13|^2 omega_p (1 + |K/k1|^2) / (eps_vac hbar L_z v_g)
    with c_conv = pi for the Gaussian-unit reading and 1 for the literal one.
    """
    if mode.v_group is None or not mode.v_group > 0:
        raise ConfigurationError("mode has no group velocity")
    if mode.Lz is None or not mode.Lz > 0:
        raise ConfigurationError("mode has no quantization length L_z")
    try:
        prefactor = CHI_CONVENTIONS[convention]
    except KeyError:
        raise ConfigurationError(f"unknown coupling convention {convention!r}") from None
    w = mode.omega if omega_p is None else omega_p
    return (prefactor * ensemble.n_o * ensemble.d13**2 * w * mode.polarization_factor
            / (VACUUM_PERMITTIVITY * HBAR * mode.Lz * mode.v_group))


def stark_shift(z, drive: DriveConfig, delta21: float = 0.0, gamma31: float = 0.0,
                delta31: float = 0.0):
    """Depth-dependent Raman detuning delta_p(z) (rad/s, complex if gamma31 > 0)."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError("z must be non-negative")
    den = delta31 + drive.delta_p - 1j * gamma31
    if den == 0:
        raise SingularityError("Delta31 + Delta_p = 0 with gamma31 = 0")
    out = delta21 + drive.delta_pR - np.exp(-2 * z / drive.xi1_cp) * abs(drive.omega_cp_rabi) ** 2 / den
    if gamma31 == 0 and np.isrealobj(np.asarray(delta21)):
        out = out.real
    return out[()] if out.ndim == 0 else out


def c_parameter(nu, drive: DriveConfig, gamma21: float):
    """C_p(nu) = [Delta_p (Delta_pR - nu) - i Delta_p gamma21] / |Omega|^2."""
    nu = np.asarray(nu, dtype=float)
    return drive.delta_p * ((drive.delta_pR - nu) - 1j * gamma21) / abs(drive.omega_cp_rabi) ** 2


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------

def _quad_complex(f, a, b, points=None, epsabs=0.0, epsrel=QUAD_RTOL, limit=2000, what="integral"):
    if b <= a:
        return 0j
    pts = None
    if points:
        pts = sorted(p for p in points if a < p < b) or None
    out = []
    for part in (lambda x: f(x).real, lambda x: f(x).imag):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(part, a, b, points=pts, epsabs=epsabs,
                                          epsrel=epsrel, limit=limit)
            except integrate.IntegrationWarning as exc:
                raise NumericError(
                    f"{what}: quadrature did not converge on [{a:.3e}, {b:.3e}]",
                    {"interval": (a, b), "points": pts, "message": str(exc)},
                ) from None
        out.append(val)
    return complex(out[0], out[1])


def _gauss_average(fn, sigma, epsabs, what):
    """Average of fn(delta) over N(0, sigma^2), truncated at +-6 sigma."""
    if sigma == 0:
        return fn(0.0)
    norm = 1.0 / (math.sqrt(2 * math.pi) * sigma)
    span = DETUNING_CUTOFF * sigma

    def integrand(d):
        return fn(d) * norm * math.exp(-0.5 * (d / sigma) ** 2)

    return _quad_complex(integrand, -span, span, epsabs=epsabs, epsrel=1e-8, what=what)


def _resolve_chi(mode, ensemble, chi, convention):
    if chi is not None:
        return float(chi)
    if mode is None:
        raise ConfigurationError("either a mode or an explicit chi is required")
    return coupling_chi(mode, ensemble, convention=convention)


# ---------------------------------------------------------------------------
# sigma_p and alpha_p
# ---------------------------------------------------------------------------

def susceptibility_sigma(mode: Optional[SppMode], ensemble: RamanEnsemble, drive: DriveConfig, *,
                         chi: Optional[float] = None, closed: bool = False,
                         convention: str = DEFAULT_CHI_CONVENTION) -> complex:
    """Refractive part sigma_p = chi <exp(-2 z/xi_p) / (Delta31 + Delta_p - i gamma31)>.

    ``closed=True`` uses the homogeneous closed form
    chi xi_p (1 - exp(-2 z_o/xi_p)) / (2 (Delta_p - i gamma31)).
    """
    chi = _resolve_chi(mode, ensemble, chi, convention)
    xi, z_o, g31 = drive.xi1_p, ensemble.z_o, ensemble.gamma31
    if z_o == 0 or chi == 0:
        return 0j
    sigma31 = 0.0 if ensemble.homogeneous else ensemble.broadening.sigma31
    if closed:
        if sigma31 > 0:
            raise ConfigurationError("closed form needs homogeneous Delta31")
        den = drive.delta_p - 1j * g31
        if den == 0:
            raise SingularityError("Delta_p = 0 with gamma31 = 0")
        return chi * xi * (1 - math.exp(-2 * z_o / xi)) / (2 * den)

    def inverse_detuning(d31):
        den = d31 + drive.delta_p - 1j * g31
        if den == 0:
            raise SingularityError("Delta31 + Delta_p = 0 with gamma31 = 0")
        return 1.0 / den

    detuning_avg = _gauss_average(inverse_detuning, sigma31, 0.0, "sigma_p detuning average")
    depth = _quad_complex(lambda z: complex(math.exp(-2 * z / xi)), 0.0, z_o, what="sigma_p depth")
    return chi * detuning_avg * depth


def _alpha_integrand_factory(nu, ensemble, drive):
    om2 = abs(drive.omega_cp_rabi) ** 2
    decay = 2 * (1 / drive.xi1_p + 1 / drive.xi1_cp)
    g21, g31 = ensemble.gamma21, ensemble.gamma31

    def F(z, d21=0.0, d31=0.0):
        den = d31 + drive.delta_p - 1j * g31
        delta = d21 + drive.delta_pR - math.exp(-2 * z / drive.xi1_cp) * om2 / den
        return om2 * math.exp(-decay * z) / ((1j * (delta - nu) + g21) * den**2)

    return F


def _resonant_depth(nu, drive, d21=0.0, d31=0.0):
    """Depth where Re delta_p(z) = nu, if any (quadrature breakpoint)."""
    om2 = abs(drive.omega_cp_rabi) ** 2
    den = d31 + drive.delta_p
    if den == 0 or om2 == 0:
        return None
    w = (d21 + drive.delta_pR - nu) * den / om2
    if w <= 0 or w >= 1:
        return None
    return -0.5 * drive.xi1_cp * math.log(w)


def alpha_numeric(nu: float, mode: Optional[SppMode], ensemble: RamanEnsemble, drive: DriveConfig, *,
                  chi: Optional[float] = None, convention: str = DEFAULT_CHI_CONVENTION) -> complex:
    """Raman absorption alpha_p(nu) (1/m) by adaptive quadrature.

    Homogeneous ensembles integrate over depth only. Gaussian broadening adds
    nested integrals over Delta31 and Delta21, each truncated at 6 widths.
    """
    chi = _resolve_chi(mode, ensemble, chi, convention)
    z_o = ensemble.z_o
    if z_o == 0 or chi == 0 or drive.omega_cp_rabi == 0:
        return 0j
    if ensemble.gamma21 == 0 and ensemble.homogeneous:
        zr = _resonant_depth(nu, drive)
        if zr is not None and zr < z_o:
            warnings.warn("gamma21 = 0 with nu inside the Stark-swept window: integrand is singular",
                          RuntimeWarning, stacklevel=2)
    F = _alpha_integrand_factory(float(nu), ensemble, drive)
    # scale for the absolute floor: peak |F| times layer depth
    scale = abs(drive.omega_cp_rabi) ** 2 / abs(drive.delta_p) ** 2 * drive.xi1_p
    scale /= max(ensemble.gamma21, 1e-300) if ensemble.gamma21 > 0 else 1.0
    epsabs = 1e-15 * scale

    if ensemble.homogeneous:
        zr = _resonant_depth(nu, drive)
        val = _quad_complex(F, 0.0, z_o, points=[zr] if zr is not None else None,
                            epsabs=epsabs, what="alpha_p depth")
        return 2 * chi * val

    b = ensemble.broadening
    s21, s31 = b.sigma21, b.sigma31

    def over_d21(z, d31):
        if s21 == 0:
            return F(z, 0.0, d31)
        norm = 1.0 / (math.sqrt(2 * math.pi) * s21)
        span = DETUNING_CUTOFF * s21
        # resonance in Delta21 at fixed (z, Delta31)
        den = d31 + drive.delta_p - 1j * ensemble.gamma31
        d_res = (nu - drive.delta_pR + math.exp(-2 * z / drive.xi1_cp) * abs(drive.omega_cp_rabi) ** 2 / den).real
        return _quad_complex(lambda d: F(z, d, d31) * norm * math.exp(-0.5 * (d / s21) ** 2),
                             -span, span, points=[d_res], epsabs=epsabs * 1e-3, epsrel=1e-8,
                             what="alpha_p Delta21 average")

    def over_depth(z):
        return _gauss_average(lambda d31: over_d21(z, d31), s31, epsabs * 1e-3, "alpha_p Delta31 average")

    val = _quad_complex(over_depth, 0.0, z_o, epsabs=epsabs, epsrel=1e-8, what="alpha_p depth")
    return 2 * chi * val


def _closed_form_ok(ensemble: RamanEnsemble, drive: DriveConfig) -> None:
    if not ensemble.homogeneous:
        raise ConfigurationError("closed-form absorption needs homogeneous broadening; use alpha_numeric")
    if ensemble.gamma31 != 0:
        raise ConfigurationError("closed-form absorption needs gamma31 = 0; use alpha_numeric")
    if abs(drive.xi1_cp - drive.xi1_p) > 1e-12 * drive.xi1_p:
        raise ConfigurationError(
            "closed-form absorption needs equal probe and control confinements; use alpha_numeric"
        )
    if drive.omega_cp_rabi == 0:
        raise ConfigurationError("closed form undefined for Omega_cp = 0 (alpha vanishes)")


def alpha_closed(nu, mode: Optional[SppMode], ensemble: RamanEnsemble, drive: DriveConfig, *,
                 z_o=None, chi: Optional[float] = None,
                 convention: str = DEFAULT_CHI_CONVENTION):
    """Homogeneous effective absorption alpha_p(nu) - 2 i sigma_p in closed form.

    ``nu`` and ``z_o`` (default: the ensemble's) broadcast against each other.
    """
    _closed_form_ok(ensemble, drive)
    chi = _resolve_chi(mode, ensemble, chi, convention)
    xi = drive.xi1_p
    zo = np.asarray(ensemble.z_o if z_o is None else z_o, dtype=float)
    nu = np.asarray(nu, dtype=float)
    C = c_parameter(nu, drive, ensemble.gamma21)
    edge = np.exp(-2 * zo / xi)
    num = 1 - C
    den = edge - C
    if np.any(num == 0) or np.any(den == 0):
        raise SingularityError("log argument hits zero or a pole (gamma21 = 0 at a window edge)")
    log = np.log(num / den)
    if ensemble.gamma21 == 0:
        # gamma21 -> 0+ limit: C approaches the real axis from sign(-Delta_p)
        ratio = num / den
        on_cut = (np.imag(ratio) == 0) & (np.real(ratio) < 0)
        log = np.where(on_cut, np.log(np.abs(ratio)) - 1j * math.pi * np.sign(drive.delta_p), log)
    out = 1j * (chi * xi) * C / drive.delta_p * log
    out = np.where(zo == 0, 0j, out)
    return out[()] if out.ndim == 0 else out


def alpha_eff_numeric(nu, mode, ensemble, drive, *, chi=None, convention=DEFAULT_CHI_CONVENTION):
    """alpha_numeric - 2 i sigma_p, both by quadrature (the closed form's oracle)."""
    sig = susceptibility_sigma(mode, ensemble, drive, chi=chi, convention=convention)
    nus = np.atleast_1d(np.asarray(nu, dtype=float))
    vals = np.array([alpha_numeric(v, mode, ensemble, drive, chi=chi, convention=convention) for v in nus])
    out = vals - 2j * sig
    return out[0] if np.ndim(nu) == 0 else out


def spectral_response(nu, mode, ensemble, drive, L_x, *, chi=None,
                      convention=DEFAULT_CHI_CONVENTION) -> SpectralResponse:
    """Effective absorption and optical density on a frequency grid.

    Uses the closed form when its preconditions hold, quadrature otherwise.
    """
    try:
        _closed_form_ok(ensemble, drive)
        alpha = alpha_closed(nu, mode, ensemble, drive, chi=chi, convention=convention)
    except ConfigurationError:
        alpha = alpha_eff_numeric(nu, mode, ensemble, drive, chi=chi, convention=convention)
    return SpectralResponse.from_alpha(nu, alpha, L_x)


# ---------------------------------------------------------------------------
# optical density maps, windows and capacity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo


def _crossing(x0, y0, x1, y1, level):
    if y1 == y0:
        return 0.5 * (x0 + x1)
    return x0 + (level - y0) * (x1 - x0) / (y1 - y0)


def absorption_window(nu, od, threshold: float = DEFAULT_OD_THRESHOLD) -> Optional[Window]:
    """Widest contiguous frequency interval with OD >= threshold.

    Edges are placed by linear interpolation between grid points.
    """
    nu = np.asarray(nu, dtype=float)
    od = np.asarray(od, dtype=float)
    above = np.isfinite(od) & (od >= threshold)
    if not above.any():
        return None
    best = None
    i, n = 0, len(nu)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        lo = nu[i] if i == 0 else _crossing(nu[i - 1], od[i - 1], nu[i], od[i], threshold)
        hi = nu[j] if j == n - 1 else _crossing(nu[j], od[j], nu[j + 1], od[j + 1], threshold)
        if best is None or hi - lo > best.width:
            best = Window(float(lo), float(hi))
        i = j + 1
    return best


def mode_capacity(response: SpectralResponse, gamma21: float,
                  od_threshold: float = DEFAULT_OD_THRESHOLD) -> int:
    """floor(Delta_in / gamma21) with Delta_in the OD >= threshold window width."""
    if not od_threshold > 0:
        raise DomainError("od_threshold must be positive")
    if not gamma21 > 0:
        raise DomainError("gamma21 must be positive")
    win = absorption_window(response.nu_grid, response.optical_density, od_threshold)
    if win is None:
        return 0
    # guard floor() against 1 ulp below an exact integer ratio
    return int(math.floor(win.width / gamma21 * (1 + 1e-12)))


@dataclass
class OpticalDensityMap:
    nu: np.ndarray
    z_o: np.ndarray
    od: np.ndarray  # shape (len(nu), len(z_o))
    L_x: float
    threshold: float
    error_mask: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.od) & (self.od > self.threshold)

    def window(self, j: int) -> Optional[Window]:
        return absorption_window(self.nu, self.od[:, j], self.threshold)

    def summary(self, gamma21: float, lambda_o: Optional[float] = None) -> dict:
        """JSON-ready summary taken on the thickest layer of the map."""
        j = int(np.argmax(self.z_o))
        win = self.window(j)
        finite = self.od[np.isfinite(self.od)]
        rows = np.nonzero(self.mask.any(axis=0))[0]
        min_zo = float(self.z_o[rows].min()) if rows.size else None
        if min_zo is not None and lambda_o:
            min_zo /= lambda_o
        resp = SpectralResponse(self.nu, self.od[:, j] / self.L_x + 0j, self.od[:, j], self.L_x)
        return {
            "window_lo": win.lo if win else None,
            "window_hi": win.hi if win else None,
            "window_width": win.width if win else 0.0,
            "max_od": float(finite.max()) if finite.size else None,
            "capacity": mode_capacity(resp, gamma21, self.threshold),
            "od_gt3_min_zo": min_zo,
            "od_threshold": self.threshold,
        }


def optical_density_map(nu, z_o, mode, ensemble: RamanEnsemble, drive: DriveConfig, L_x: float, *,
                        chi: Optional[float] = None, threshold: float = DEFAULT_OD_THRESHOLD,
                        convention: str = DEFAULT_CHI_CONVENTION,
                        workers: Optional[int] = None) -> OpticalDensityMap:
    """OD(nu, z_o) = Re alpha_eff * L_x on a (frequency x thickness) grid.

    Cells whose evaluation fails are NaN and flagged in ``error_mask``.
    Columns (one per thickness) are evaluated in parallel and assembled in order.
    """
    if not L_x > 0:
        raise DomainError("L_x must be positive")
    nu = np.asarray(nu, dtype=float)
    z_o = np.asarray(z_o, dtype=float)
    chi = _resolve_chi(mode, ensemble, chi, convention)
    try:
        _closed_form_ok(ensemble, drive)
        closed = True
    except ConfigurationError:
        closed = False

    def column(zj):
        ens = ensemble.with_thickness(float(zj))
        col = np.full(nu.size, np.nan)
        if closed:
            try:
                return np.real(alpha_closed(nu, None, ens, drive, chi=chi)) * L_x
            except SingularityError:
                pass
        for i, v in enumerate(nu):
            try:
                if closed:
                    a = alpha_closed(v, None, ens, drive, chi=chi)
                else:
                    a = alpha_eff_numeric(v, None, ens, drive, chi=chi)
                col[i] = float(np.real(a)) * L_x
            except (SingularityError, NumericError):
                pass
        return col

    cols = parallel_map(column, list(z_o), workers)
    od = np.stack(cols, axis=1) if cols else np.empty((nu.size, 0))
    return OpticalDensityMap(nu, z_o, od, L_x, threshold, ~np.isfinite(od))


# ---------------------------------------------------------------------------
# retrieval planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CribPlan:
    """Parameter map of the echo ("E") system derived from the storage drive."""

    source: DriveConfig
    t_prime: float
    amplitude_sign_flip: bool
    xi1_e: float
    xi1_ce: float
    delta_e: float
    delta_eR: float
    invert_inhomogeneous: bool
    omega_ce: complex
    s13_zero_at_switch: bool = True
    s12_continuous: bool = True

    def echo_drive(self) -> DriveConfig:
        """Drive seen by the atoms after the switch."""
        return DriveConfig(self.omega_ce, self.delta_e, self.delta_eR, self.xi1_e, self.xi1_ce)

    def echo_control(self, omega_cp_profile):
        """Readout control profile Omega_ce(tau_e) = -Omega_cp(2 t' - tau_e)."""
        t2 = 2 * self.t_prime
        return lambda tau_e: -omega_cp_profile(t2 - tau_e)

    def with_control(self, omega_ce: complex) -> "CribPlan":
        return replace(self, omega_ce=omega_ce)


def crib_plan(drive: DriveConfig, ensemble: RamanEnsemble, t_prime: float,
              probe_bandwidth: Optional[float] = None, min_detuning_ratio: float = 10.0) -> CribPlan:
    """Build the time-reversing retrieval plan.

    Detunings are inverted (Delta_e = -Delta_p, Delta_eR = -Delta_pR), the
    readout control is the negated storage control, confinements are copied,
    and the per-atom detuning flip is requested only for broadened ensembles.
    """
    if probe_bandwidth is not None and abs(drive.delta_p) < min_detuning_ratio * probe_bandwidth:
        raise ConfigurationError(
            f"|Delta_p| = {abs(drive.delta_p):.3e} is not >> probe bandwidth {probe_bandwidth:.3e}: "
            "S13 would not vanish at the switch"
        )
    return CribPlan(
        source=drive,
        t_prime=float(t_prime),
        amplitude_sign_flip=True,
        xi1_e=drive.xi1_p,
        xi1_ce=drive.xi1_cp,
        delta_e=-drive.delta_p,
        delta_eR=-drive.delta_pR,
        invert_inhomogeneous=not ensemble.homogeneous,
        omega_ce=-drive.omega_cp_rabi,
    )


@dataclass(frozen=True)
class PhaseMatch:
    K_ce: np.ndarray
    residual: float
    magnitude_mismatch: Optional[float]
    angle: float
    feasible: bool


def phase_match(K_cp, omega_p: float, omega_e: float, n_p: float, n_e: float,
                k_ce_expected: Optional[float] = None, tol: float = 1e-2) -> PhaseMatch:
    """Readout control wavevector from c (K_ce - K_cp) = (n_p w_p + n_e w_e) e_x.

    If ``k_ce_expected`` (the SPP wavenumber at the readout frequency) is given
    the relative magnitude mismatch is reported and checked against ``tol``.
    """
    K_cp = np.asarray(K_cp, dtype=float)
    shift = (n_p * omega_p + n_e * omega_e) / SPEED_OF_LIGHT
    K_ce = K_cp.copy()
    K_ce[0] = K_cp[0] + shift
    lhs = SPEED_OF_LIGHT * (K_ce - K_cp)
    rhs = np.zeros_like(K_cp)
    rhs[0] = n_p * omega_p + n_e * omega_e
    scale = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(SPEED_OF_LIGHT * K_ce)))
    residual = float(np.linalg.norm(lhs - rhs) / scale) if scale else 0.0
    angle = float(math.atan2(K_ce[1], K_ce[0]))
    mismatch = None
    feasible = True
    if k_ce_expected is not None:
        mismatch = abs(float(np.linalg.norm(K_ce)) - k_ce_expected) / k_ce_expected
        feasible = mismatch <= tol
    return PhaseMatch(K_ce, residual, mismatch, angle, feasible)
