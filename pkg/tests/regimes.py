"""Shared parameter sets for the test suite.

The reference interface is the 285 nm operating point with
eps2 = -1.34 + 1e-4 i and a 0.55 lambda quantization length. Dynamics runs
use far-detuned drives so that |Delta| stays well above the pulse bandwidth;
expensive runs are memoised so several tests can share them.
"""

import math
from functools import lru_cache

import numpy as np

from sppqm.dynamics import (
    PulseSpec, SimGrid, hold, length_for_od, run_retrieval, run_storage, transmission_spectrum,
)
from sppqm.materials import DielectricParams, MaterialPoint, convert_units
from sppqm.memory import DriveConfig, RamanEnsemble, alpha_closed, coupling_chi, crib_plan
from sppqm.sppmode import InterfaceSpec, solve_mode

LAMBDA = 285e-9
XI = LAMBDA / 40
GAMMA21 = 1e4
N_O = 2e25
D13 = convert_units(1e-3, "e*a0", "C*m")
Z_THICK = 0.3 * LAMBDA


def fig6_spec():
    return InterfaceSpec(DielectricParams(1.31, 1.0), MaterialPoint(-1.34 + 1e-4j, 0.0), LAMBDA)


@lru_cache(maxsize=None)
def fig6_mode():
    return solve_mode(fig6_spec(), lz=0.55 * LAMBDA)


def fig6_ensemble(z_o=Z_THICK, gamma21=GAMMA21):
    return RamanEnsemble(n_o=N_O, d13=D13, gamma21=gamma21, z_o=z_o)


def fig6_drive():
    return DriveConfig(omega_cp_rabi=1e7, delta_p=1e7, delta_pR=7e7, xi1_p=XI, xi1_cp=XI)


@lru_cache(maxsize=None)
def fig6_chi():
    return coupling_chi(fig6_mode(), fig6_ensemble())


def fig6_length():
    return 0.1 * fig6_mode().l_x


# --- echo regime: Delta = 5e6, Stark width 4e5 -------------------------------

ECHO_DELTA = 5e6
ECHO_WIDTH = 4e5


def echo_drive():
    om = math.sqrt(ECHO_WIDTH * ECHO_DELTA)
    return DriveConfig(om, ECHO_DELTA, 0.55 * ECHO_WIDTH, XI, XI)


def echo_pulse(amplitude=1.0):
    return PulseSpec("gaussian", duration=4 * math.log(2) / (0.2 * ECHO_WIDTH), amplitude=amplitude)


def echo_grid(od, ens=None, refine=1):
    ens = ens or fig6_ensemble(gamma21=0.0)
    L = length_for_od(od, 0.0, ens, echo_drive(), fig6_chi())
    g = SimGrid(N_x=20, L_x=L, N_z=16, dt=1.9e-8, T=2.2e-4)
    return g.refined(refine) if refine > 1 else g


@lru_cache(maxsize=None)
def echo_storage(od, amplitude=1.0, refine=1):
    ens = fig6_ensemble(gamma21=0.0)
    return run_storage(echo_grid(od, ens, refine), None, ens, echo_drive(),
                       echo_pulse(amplitude), chi=fig6_chi())


@lru_cache(maxsize=None)
def echo_run(od, amplitude=1.0):
    st = echo_storage(od, amplitude)
    plan = crib_plan(st.drive, st.ensemble, st.grid.T, st.pulse.bandwidth)
    return run_retrieval(hold(st, 0.0), plan)


# --- hold regime: Delta = 5e7, Stark width 2e6, gamma21 = 1e4 -----------------

HOLD_DELTA = 5e7
HOLD_WIDTH = 2e6


@lru_cache(maxsize=None)
def hold_storage():
    drv = DriveConfig(math.sqrt(HOLD_WIDTH * HOLD_DELTA), HOLD_DELTA, 0.55 * HOLD_WIDTH, XI, XI)
    ens = fig6_ensemble(gamma21=GAMMA21)
    dur = 4 * math.log(2) / (0.25 * HOLD_WIDTH)
    pulse = PulseSpec("gaussian", duration=dur, center=2.5 * dur)
    L = length_for_od(4, 0.0, ens, drv, fig6_chi())
    g = SimGrid(N_x=20, L_x=L, N_z=16, dt=1.9e-9, T=5 * dur)
    return run_storage(g, None, ens, drv, pulse, chi=fig6_chi())


@lru_cache(maxsize=None)
def hold_efficiency(hold_time, ramp_time=0.0):
    st = hold_storage()
    plan = crib_plan(st.drive, st.ensemble, st.grid.T, st.pulse.bandwidth)
    _, metrics = run_retrieval(hold(st, hold_time, ramp_time), plan)
    return metrics.efficiency


# --- transmission regime: Delta = 4e7, Stark width 4e5, gamma21 = 6e4 ---------

TRANS_DELTA = 4e7
TRANS_WIDTH = 4e5


def transmission_setup():
    drv = DriveConfig(math.sqrt(TRANS_WIDTH * TRANS_DELTA), TRANS_DELTA, 0.5 * TRANS_WIDTH, XI, XI)
    ens = fig6_ensemble(gamma21=6e4)
    return ens, drv


@lru_cache(maxsize=None)
def transmission_run(length_factor=1.0):
    """Time-domain transmission at peak OD 2 (times ``length_factor``)."""
    ens, drv = transmission_setup()
    W = TRANS_WIDTH
    probe = np.linspace(-0.5 * W, 0.5 * W, 401)
    L = 2.0 / np.real(alpha_closed(probe, None, ens, drv, chi=fig6_chi())).max()
    g = SimGrid(N_x=20, L_x=L * length_factor, N_z=16, dt=2.4e-9, T=1.5e-4)
    return L * length_factor, transmission_spectrum(g, None, ens, drv, chi=fig6_chi())
