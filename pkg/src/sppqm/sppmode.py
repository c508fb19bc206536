"""Transverse-magnetic SPP modes of the dielectric / NIMM interface.

The solver works in the mu2 -> 0 regime where the complex in-plane
wavevector has the closed form K = k0 / sqrt(1 - (eps1/eps2)**2) with
k0 = 2 pi / lambda_o the wavenumber of free light in the dielectric.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, NoBoundModeError, SingularityError, SppqmError
from .materials import (
    DielectricParams,
    DrudeModel,
    SPEED_OF_LIGHT,
    MaterialPoint,
    eval_nimm,
    lambda_from_omega,
    omega_from_lambda,
)

FIG2_EPS_IM = (1e-3, 10 ** (-1.5), 1e-2)

# relative tolerance of the TM boundary relation k1/k2 = -eps1/eps2
BOUNDARY_RTOL = 1e-10
MU2_ATOL = 1e-9


@dataclass(frozen=True)
class InterfaceSpec:
    dielectric: DielectricParams
    nimm: MaterialPoint
    lambda_o: float

    def __post_init__(self):
        if not self.lambda_o > 0:
            raise DomainError("lambda_o must be positive")
        eps2 = complex(self.nimm.eps2)
        if not eps2.real < 0:
            raise DomainError(f"Re eps2 must be negative, got {eps2.real}")
        if abs(eps2.real) == self.dielectric.eps1:
            raise SingularityError(
                "|Re eps2| equals eps1: the mode is singular here; move away from "
                "the matching point (keep |eps_r + eps1|/|eps_r| well above eps_i/|eps_r|)"
            )

    @property
    def k0(self) -> float:
        """Free-light wavenumber in the dielectric, 2 pi / lambda_o."""
        return 2 * math.pi / self.lambda_o

    @property
    def omega(self) -> float:
        return omega_from_lambda(self.lambda_o, self.dielectric)

    @classmethod
    def from_ratios(cls, eps1: float, loss_ratio: float, detuning_ratio: float,
                    lambda_o: float = 1.0, mu1: float = 1.0) -> "InterfaceSpec":
        """Build the interface from eps_i/|eps_r| and |eps_r + eps1|/|eps_r|.

        ``|eps_r| > eps1`` is assumed, so |eps_r| = eps1 / (1 - detuning_ratio).
        """
        abs_er = eps1 / (1.0 - detuning_ratio)
        eps2 = complex(-abs_er, loss_ratio * abs_er)
        return cls(DielectricParams(eps1, mu1), MaterialPoint(eps2, 0.0), lambda_o)

    @classmethod
    def from_drude(cls, model: DrudeModel, dielectric: DielectricParams, omega: float) -> "InterfaceSpec":
        """Interface at ``omega`` with eps2 from the Drude model and mu2 forced to 0."""
        point = eval_nimm(model, omega)
        return cls(dielectric, MaterialPoint(point.eps2, 0.0), lambda_from_omega(omega, dielectric))


@dataclass(frozen=True)
class LowLossDiagnostics:
    loss_ratio: float  # eps_i / |eps_r|
    detuning_ratio: float  # |eps_r + eps1| / |eps_r|
    margin: float
    passed: bool


@dataclass(frozen=True)
class SppMode:
    """One solved mode. Lengths in m, wavevectors in 1/m, velocities in m/s."""

    k_par: float
    kappa: float
    k1: complex
    k2: complex
    xi1: float
    xi2: float
    lambda_par: float
    l_x: float
    omega: float
    v_phase: float
    v_group: Optional[float]
    vg_policy: str
    Lz: Optional[float] = None
    lz_source: str = "unset"
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def K(self) -> complex:
        return complex(self.k_par, self.kappa)

    @property
    def polarization_factor(self) -> float:
        """|e_x + i e_z K/k1|**2 = 1 + |K/k1|**2."""
        return 1.0 + abs(self.K / self.k1) ** 2

    @property
    def refractive_index(self) -> float:
        """Effective mode index Re(K) c / omega."""
        return self.k_par * SPEED_OF_LIGHT / self.omega


def _check_mu2(spec: InterfaceSpec) -> None:
    if abs(complex(spec.nimm.mu2)) > MU2_ATOL:
        raise DomainError(
            f"closed-form dispersion holds only for mu2 = 0, got mu2 = {spec.nimm.mu2}"
        )


def _kpar(eps1, eps2, k0):
    """Branch-fixed K = k0/sqrt(1 - (eps1/eps2)^2); vectorised, no checks."""
    w = 1.0 - (eps1 / eps2) ** 2
    K = k0 / np.sqrt(w)
    return np.where(np.real(K) < 0, -K, K)


def dispersion_exact(spec: InterfaceSpec) -> complex:
    """Complex in-plane wavevector of the TM mode (1/m)."""
    _check_mu2(spec)
    eps1 = spec.dielectric.eps1
    eps2 = complex(spec.nimm.eps2)
    w = 1.0 - (eps1 / eps2) ** 2
    if w == 0:
        raise SingularityError(
            "(eps1/eps2)^2 = 1: wavevector diverges; choose eps2 with "
            "|eps_r + eps1|/|eps_r| larger than eps_i/|eps_r|"
        )
    K = complex(_kpar(eps1, eps2, spec.k0))
    if not K.real > 0:
        raise NoBoundModeError(
            f"no propagating mode: K = {K} (|Re eps2| < eps1 without loss gives pure evanescence)"
        )
    return K


def dispersion_approx(spec: InterfaceSpec) -> tuple[complex, float]:
    """Low-loss form K = k0 sqrt(eps1/(2 eps_i)) sqrt(u/(1 - iu)).

    Returns ``(K, u)`` with u = 2 eps_i |eps_r| / (|eps_r|^2 - eps_i^2 - eps1^2).
    """
    _check_mu2(spec)
    eps1 = spec.dielectric.eps1
    er, ei = complex(spec.nimm.eps2).real, complex(spec.nimm.eps2).imag
    den = er**2 - ei**2 - eps1**2
    if den <= 0:
        raise DomainError(
            "|eps_r|^2 - eps_i^2 - eps1^2 <= 0: the low-loss approximation does not apply"
        )
    if ei <= 0:
        raise DomainError("the approximate form needs eps_i > 0")
    u = 2 * ei * abs(er) / den
    K = spec.k0 * np.sqrt(eps1 / (2 * ei)) * np.sqrt(u / (1 - 1j * u))
    K = complex(K)
    if K.real < 0:
        K = -K
    return K, float(u)


def low_loss_check(spec: InterfaceSpec, margin: float = 0.1) -> LowLossDiagnostics:
    """Check eps_i/|eps_r| << |eps_r+eps1|/|eps_r| << 1 at the given margin."""
    if not 0 < margin < 1:
        raise DomainError("margin must lie in (0, 1)")
    eps2 = complex(spec.nimm.eps2)
    r1 = eps2.imag / abs(eps2.real)
    r2 = abs(eps2.real + spec.dielectric.eps1) / abs(eps2.real)
    return LowLossDiagnostics(r1, r2, margin, bool(r1 <= margin * r2 and r2 <= margin))


def _k1_from(spec: InterfaceSpec, K: complex) -> complex:
    # K^2 - k0^2 rewritten as k0^2 (eps1/eps2)^2 / w to avoid cancellation as w -> 1
    eps1 = spec.dielectric.eps1
    ratio = eps1 / complex(spec.nimm.eps2)
    w = 1.0 - ratio**2
    k1 = complex(np.sqrt(spec.k0**2 * ratio**2 / w))
    return -k1 if k1.real < 0 else k1


def _k2_from(spec: InterfaceSpec, K: complex) -> complex:
    d = spec.dielectric
    eps2, mu2 = complex(spec.nimm.eps2), complex(spec.nimm.mu2)
    k2 = complex(np.sqrt(K**2 - spec.k0**2 * eps2 * mu2 / (d.eps1 * d.mu1)))
    return -k2 if k2.real < 0 else k2


def group_velocity(spec: InterfaceSpec, model: DrudeModel, rel_step: float = 1e-4) -> float:
    """d omega / d k_par by a centred difference, re-solving at omega (1 +- h).

    eps2 is taken from ``model`` at the shifted frequencies (mu2 kept at 0);
    lambda_o scales as 1/omega.
    """
    w0 = spec.omega
    wp, wm = w0 * (1 + rel_step), w0 * (1 - rel_step)
    e1 = spec.dielectric.eps1
    kp = _kpar(e1, eval_nimm(model, wp).eps2, spec.k0 * (1 + rel_step)).real
    km = _kpar(e1, eval_nimm(model, wm).eps2, spec.k0 * (1 - rel_step)).real
    return float((wp - wm) / (kp - km))


def solve_mode(spec: InterfaceSpec, model: Optional[DrudeModel] = None,
               lz: Optional[float] = None, vg_step: float = 1e-4) -> SppMode:
    """Solve the mode and fill confinements, lengths and velocities.

    ``model`` enables the finite-difference group velocity and the
    quantization length from the nonlinear confinement formula; without it
    the group velocity falls back to the phase velocity. An explicit ``lz``
    overrides the computed quantization length.
    """
    K = dispersion_exact(spec)
    k1 = _k1_from(spec, K)
    k2 = _k2_from(spec, K)
    target = -spec.dielectric.eps1 / complex(spec.nimm.eps2)
    mismatch = abs(k1 / k2 - target) / abs(target)
    if mismatch > BOUNDARY_RTOL:
        raise NoBoundModeError(
            f"decaying branch violates k1/k2 = -eps1/eps2 (relative mismatch {mismatch:.2e})"
        )
    omega = spec.omega
    v_phase = omega / K.real
    if model is not None:
        v_group = group_velocity(spec, model, vg_step)
        policy = f"finite_difference(rel_step={vg_step:g})"
    else:
        v_group = v_phase
        policy = "phase_velocity_fallback"

    xi1 = 1.0 / k1.real
    xi2 = 1.0 / abs(k2)
    if lz is not None:
        Lz, lz_source = float(lz), "explicit"
    elif model is not None:
        Lz = quantization_length(spec, xi1, xi2, model)
        lz_source = "nonlinear_confinement"
    else:
        Lz, lz_source = None, "unset"
    return SppMode(
        k_par=K.real,
        kappa=K.imag,
        k1=k1,
        k2=k2,
        xi1=xi1,
        xi2=xi2,
        lambda_par=2 * math.pi / K.real,
        l_x=(1.0 / K.imag) if K.imag > 0 else math.inf,
        omega=omega,
        v_phase=v_phase,
        v_group=v_group,
        vg_policy=policy,
        Lz=Lz,
        lz_source=lz_source,
        metadata={"boundary_mismatch": mismatch, "lambda_o": spec.lambda_o},
    )


@dataclass(frozen=True)
class FieldSample:
    z: np.ndarray
    e_x: np.ndarray
    e_z: np.ndarray
    h_y: np.ndarray  # in units where a free wave in the dielectric has H/E = sqrt(eps1/mu1)


def field_profile(mode: SppMode, spec: InterfaceSpec, z) -> FieldSample:
    """Mode fields per unit surface amplitude E_o at height ``z`` (m)."""
    z = np.asarray(z, dtype=float)
    K, k1, k2 = mode.K, mode.k1, mode.k2
    upper = z >= 0
    decay = np.where(upper, np.exp(-k1 * np.where(upper, z, 0.0)),
                     np.exp(k2 * np.where(upper, 0.0, z)))
    e_x = decay.astype(complex)
    e_z = np.where(upper, 1j * K / k1, -1j * K / k2) * decay
    d = spec.dielectric
    h_y = (spec.k0 / k1) * math.sqrt(d.eps1 / d.mu1) * decay
    return FieldSample(z, e_x, e_z, h_y)


def magnetic_suppression(mode: SppMode, spec: InterfaceSpec) -> float:
    """|H_y(0)| / E_o relative to a free wave in the dielectric (2 pi xi1 / lambda_o)."""
    d = spec.dielectric
    h0 = field_profile(mode, spec, 0.0).h_y
    return float(abs(h0) / math.sqrt(d.eps1 / d.mu1))


def normal_field_ratio(mode: SppMode, spec: InterfaceSpec) -> complex:
    """E_z just below the interface over E_z just above it."""
    below = -1j * mode.K / mode.k2
    above = 1j * mode.K / mode.k1
    return complex(below / above)


def quantization_length(spec: InterfaceSpec, xi1: float, xi2: float,
                        model: DrudeModel = DrudeModel()) -> float:
    """Nonlinear quantization length from the two confinements.

    The second brace's confinement symbol is read as the NIMM-side xi2.
    """
    if xi1 < 0 or xi2 < 0:
        raise DomainError("confinements must be non-negative")
    e1, mu1 = spec.dielectric.eps1, spec.dielectric.mu1
    lam = spec.lambda_o
    a = 2 * math.pi * xi1 / lam
    b = 2 * math.pi * xi2 / lam
    upper = (2 * e1 + e1 * a**2) * xi1
    lower = (2 * (2 * model.eps_inf + e1) + 2 * e1 * b**2 * model.mu_inf / mu1) * xi2
    return upper + lower


def quantization_length_limit(model: DrudeModel, spec: InterfaceSpec, xi: float) -> tuple[float, float]:
    """Linear-limit forms ``(4 (eps_inf + eps1) xi, 4 mu_inf (w_e/w_mu)^2 xi)``.

    The two are not numerically equal for the reference parameters; callers
    pick one explicitly.
    """
    if not xi > 0:
        raise DomainError("xi must be positive")
    form_a = 4 * (model.eps_inf + spec.dielectric.eps1) * xi
    form_b = 4 * model.mu_inf * (model.omega_e / model.omega_mu) ** 2 * xi
    return form_a, form_b


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

def worker_count() -> int:
    """Thread cap from SPPQM_THREADS (default: CPU count)."""
    raw = os.environ.get("SPPQM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, workers: Optional[int] = None) -> list:
    """Order-preserving map over a thread pool."""
    items = list(items)
    workers = workers or worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SweepRow:
    eps_r: float
    eps_im: float
    value: float
    error: str = ""


def _sweep(eps_r, eps_im, quantity, eps1, mu1, workers):
    lambda_o = 1.0
    grid = [(float(er), float(ei)) for er in sorted(eps_r) for ei in sorted(eps_im)]

    def one(point):
        er, ei = point
        try:
            spec = InterfaceSpec(DielectricParams(eps1, mu1), MaterialPoint(complex(er, ei), 0.0), lambda_o)
            mode = solve_mode(spec)
            value = mode.l_x if quantity == "lx" else mode.xi1
            return SweepRow(er, ei, value / lambda_o)
        except SppqmError as exc:
            return SweepRow(er, ei, math.nan, f"{type(exc).__name__}: {exc}")

    return parallel_map(one, grid, workers)


def sweep_figure1(eps_r, eps_im=FIG2_EPS_IM, eps1: float = 1.31, mu1: float = 1.0,
                  workers: Optional[int] = None) -> list[SweepRow]:
    """Propagation length l_x / lambda_o over an (eps_r, eps_im) grid."""
    return _sweep(eps_r, eps_im, "lx", eps1, mu1, workers)


def sweep_figure2(eps_r, eps_im=FIG2_EPS_IM, eps1: float = 1.31, mu1: float = 1.0,
                  workers: Optional[int] = None) -> list[SweepRow]:
    """Confinement xi1 / lambda_o over an (eps_r, eps_im) grid."""
    return _sweep(eps_r, eps_im, "xi1", eps1, mu1, workers)
