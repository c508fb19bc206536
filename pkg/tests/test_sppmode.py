import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from sppqm.errors import DomainError, NoBoundModeError, SingularityError
from sppqm.materials import DielectricParams, DrudeModel, MaterialPoint, eval_nimm
from sppqm.sppmode import (
    InterfaceSpec, dispersion_approx, dispersion_exact, field_profile, low_loss_check,
    magnetic_suppression, normal_field_ratio, parallel_map, quantization_length,
    quantization_length_limit, solve_mode, sweep_figure1, sweep_figure2, worker_count,
)

EPS1 = 1.31


def spec_at(er, ei, lam=1.0):
    return InterfaceSpec(DielectricParams(EPS1, 1.0), MaterialPoint(complex(er, ei), 0.0), lam)


def ref_spec():
    return InterfaceSpec.from_ratios(EPS1, 1e-4, 1e-2)


def test_representative_wavevector():
    K = dispersion_exact(ref_spec()) / (2 * math.pi)
    target = math.sqrt(50) * (1 + 1j / 200)
    assert abs(K - target) / abs(target) < 0.05
    assert K.real == pytest.approx(7.07, rel=0.05)
    assert K.imag == pytest.approx(0.0354, rel=0.05)


def test_lossless_gives_real_wavevector():
    assert dispersion_exact(spec_at(-2.0, 0.0)).imag == 0.0


def test_mirror_limit():
    K = dispersion_exact(spec_at(-1e9, 1e-3))
    assert K == pytest.approx(2 * math.pi, rel=1e-12)


def test_matching_point_is_singular():
    with pytest.raises(SingularityError):
        spec_at(-EPS1, 1e-3)


def test_nonzero_mu2_rejected():
    spec = InterfaceSpec(DielectricParams(), MaterialPoint(-1.34 + 1e-4j, 0.5), 1.0)
    with pytest.raises(DomainError):
        dispersion_exact(spec)


def test_positive_eps_r_rejected():
    with pytest.raises(DomainError):
        spec_at(1.5, 1e-3)


def test_lossless_below_matching_has_no_bound_mode():
    with pytest.raises(NoBoundModeError):
        solve_mode(spec_at(-1.0, 0.0))


def test_approx_at_representative_point():
    K, u = dispersion_approx(ref_spec())
    assert u == pytest.approx(0.0100, rel=0.01)
    K = K / (2 * math.pi)
    assert K.real == pytest.approx(7.07, rel=0.01)
    assert K.imag / K.real == pytest.approx(0.0050, rel=0.01)


@given(st.floats(1e-7, 1e-4))
def test_approx_small_u_loss_ratio(ei):
    K, u = dispersion_approx(spec_at(-2.0, ei))
    assert K.imag / K.real == pytest.approx(u / 2, rel=1e-3)


def test_approx_domain():
    with pytest.raises(DomainError):
        dispersion_approx(spec_at(-1.2, 1e-3))
    with pytest.raises(DomainError):
        dispersion_approx(spec_at(-2.0, 0.0))


def test_low_loss_check_examples():
    assert low_loss_check(ref_spec()).passed
    d = low_loss_check(InterfaceSpec.from_ratios(EPS1, 0.0, 0.05), margin=0.1)
    assert d.loss_ratio == 0.0 and d.passed
    assert not low_loss_check(InterfaceSpec.from_ratios(EPS1, 1e-4, 0.5), margin=0.1).passed
    with pytest.raises(DomainError):
        low_loss_check(ref_spec(), margin=1.5)


def _low_loss_grid(margin):
    for r2 in np.linspace(1e-3, margin, 25):
        for frac in (0.0, 0.25, 0.5, 1.0):
            r1 = frac * margin * r2
            yield r1, r2


def test_approx_tracks_exact_inside_margin_0p05():
    """Grid-sampled: |K_approx| within 2% of |K_exact| whenever low_loss_check passes at 0.05.

    Expected to fail near r2 = 0.05. For eps_i -> 0 the ratio
    |K_approx|/|K_exact| tends to sqrt(eps1/|eps_r|) = sqrt(1 - r2), which is
    already 2.5% off at r2 = 0.05.
    """
    worst = (0.0, None)
    for r1, r2 in _low_loss_grid(0.05):
        spec = InterfaceSpec.from_ratios(EPS1, max(r1, 1e-12), r2)
        if not low_loss_check(spec, margin=0.05).passed:
            continue
        err = abs(abs(dispersion_approx(spec)[0]) / abs(dispersion_exact(spec)) - 1)
        worst = max(worst, (err, (r1, r2)))
    assert worst[0] <= 0.02, f"max mismatch {worst[0]:.4f} at (r1, r2) = {worst[1]}"


@given(st.floats(1e-3, 0.05), st.floats(0.0, 1.0))
def test_approx_mismatch_follows_sqrt_rule(r2, frac):
    r1 = max(frac * 0.05 * r2, 1e-12)
    spec = InterfaceSpec.from_ratios(EPS1, r1, r2)
    ratio = abs(dispersion_approx(spec)[0]) / abs(dispersion_exact(spec))
    assert ratio == pytest.approx(math.sqrt(1 - r2), rel=5e-3)


def test_approx_within_two_percent_up_to_r2_0p039():
    for r1, r2 in _low_loss_grid(0.039):
        spec = InterfaceSpec.from_ratios(EPS1, max(r1, 1e-12), r2)
        err = abs(abs(dispersion_approx(spec)[0]) / abs(dispersion_exact(spec)) - 1)
        assert err <= 0.02


nimm_points = st.tuples(
    st.floats(-30.0, -0.2).filter(lambda er: abs(abs(er) - EPS1) > 1e-3),
    st.one_of(st.just(0.0), st.floats(1e-9, 0.5)),
)


@settings(max_examples=200)
@given(nimm_points)
def test_mode_invariants(point):
    er, ei = point
    spec = spec_at(er, ei, lam=285e-9)
    try:
        m = solve_mode(spec)
    except NoBoundModeError:
        assume(False)
    K = m.K
    assert K.real > 0 and K.imag >= 0
    assert m.k1.real > 0 and m.k2.real > 0
    eps2 = complex(er, ei)
    target = -EPS1 / eps2
    assert abs(m.k1 / m.k2 - target) <= 1e-10 * abs(target)
    assert m.lambda_par * m.k_par == pytest.approx(2 * math.pi, rel=1e-15)
    if ei > 0:
        assert m.l_x * m.kappa == pytest.approx(1.0, rel=1e-15)
    resid = K**2 - spec.k0**2 / (1 - (EPS1 / eps2) ** 2)
    assert abs(resid) <= 1e-12 * abs(K**2)


def test_lossless_propagation_length_is_infinite():
    m = solve_mode(spec_at(-2.0, 0.0))
    assert m.l_x == math.inf and m.kappa == 0.0


def test_confinement_definitions():
    m = solve_mode(ref_spec())
    assert m.xi1 == 1 / m.k1.real
    assert m.xi2 == 1 / abs(m.k2)
    assert m.xi1 == pytest.approx(1 / (14 * math.pi), rel=0.02)


def test_field_decays_by_e_at_xi1():
    spec = spec_at(-1.34, 0.0)
    m = solve_mode(spec)
    f = field_profile(m, spec, np.array([0.0, m.xi1]))
    assert abs(f.e_x[1]) / abs(f.e_x[0]) == pytest.approx(math.exp(-1), rel=1e-12)


def test_normal_field_jump_matches_permittivity_ratio():
    spec = ref_spec()
    m = solve_mode(spec)
    # D_z continuity: eps1 E_z(0+) = eps2 E_z(0-)
    assert normal_field_ratio(m, spec) == pytest.approx(EPS1 / complex(spec.nimm.eps2), rel=1e-10)


def test_magnetic_suppression_is_two_pi_xi1_over_lambda():
    spec = ref_spec()
    m = solve_mode(spec)
    assert magnetic_suppression(m, spec) == pytest.approx(abs(spec.k0 / m.k1), rel=1e-12)
    assert magnetic_suppression(m, spec) == pytest.approx(1 / 7, rel=0.02)


def test_group_velocity_policy():
    lam = 285e-9
    spec = InterfaceSpec(DielectricParams(), MaterialPoint(-1.34 + 1e-4j), lam)
    m = solve_mode(spec)
    assert m.v_group == m.v_phase
    assert m.vg_policy == "phase_velocity_fallback"
    model = DrudeModel(gamma_e=1e13)
    w = 7.0e15
    spec_d = InterfaceSpec.from_drude(model, DielectricParams(), w)
    md = solve_mode(spec_d, model)
    assert md.vg_policy.startswith("finite_difference")
    # independent check: slope of k_par(omega) from wider-step differences
    ks = []
    for h in (-1e-3, 1e-3):
        s = InterfaceSpec.from_drude(model, DielectricParams(), w * (1 + h))
        ks.append(dispersion_exact(s).real)
    assert md.v_group == pytest.approx(2e-3 * w / (ks[1] - ks[0]), rel=1e-3)
    assert 0 < md.v_group < md.v_phase


def test_from_drude_forces_mu2_zero():
    spec = InterfaceSpec.from_drude(DrudeModel(), DielectricParams(), 7e15)
    assert spec.nimm.mu2 == 0.0
    assert spec.nimm.eps2 == eval_nimm(DrudeModel(), 7e15).eps2


def test_quantization_length_examples():
    lam = 1.0
    spec = spec_at(-1.34, 1e-4, lam)
    model = DrudeModel(eps_inf=2.0, mu_inf=2.0)
    xi = lam / 40
    assert quantization_length(spec, xi, xi, model) == pytest.approx(0.335 * lam, rel=0.02)
    assert quantization_length(spec, 0.0, 0.0, model) == 0.0
    # dropping the (2 pi xi / lam)^2 terms leaves the linear-limit form (a)
    tiny = 1e-9
    form_a, _ = quantization_length_limit(model, spec, tiny)
    assert quantization_length(spec, tiny, tiny, model) == pytest.approx(form_a, rel=1e-12)
    with pytest.raises(DomainError):
        quantization_length(spec, -xi, xi, model)


def test_quantization_length_limit_forms():
    spec = spec_at(-1.34, 1e-4, 1.0)
    model = DrudeModel(eps_inf=2.0, mu_inf=2.0, omega_e=1.67, omega_mu=1.0)
    a, b = quantization_length_limit(model, spec, 1 / 40)
    assert b == pytest.approx(8 * 1.67**2 / 40, rel=1e-12)
    assert a == pytest.approx(13.24 / 40, rel=1e-12)
    a2, b2 = quantization_length_limit(model, spec, 2 / 40)
    assert (a2, b2) == pytest.approx((2 * a, 2 * b), rel=1e-15)
    with pytest.raises(DomainError):
        quantization_length_limit(model, spec, 0.0)


def test_explicit_lz_overrides():
    m = solve_mode(ref_spec(), lz=0.55)
    assert m.Lz == 0.55 and m.lz_source == "explicit"


def test_sweep_orderings():
    eps_r = np.linspace(-2.0, -1.35, 14)
    rows1 = sweep_figure1(eps_r)
    rows2 = sweep_figure2(eps_r)
    lx = {(r.eps_r, r.eps_im): r.value for r in rows1}
    xi = {(r.eps_r, r.eps_im): r.value for r in rows2}
    for er in eps_r:
        er = float(er)
        assert lx[(er, 1e-3)] > lx[(er, 1e-2)]
    assert xi[(-1.35, 1e-2)] > xi[(-1.35, 1e-3)]


def test_sweep_row_order_and_error_rows():
    rows = sweep_figure1([-1.5, -1.31, -2.0], eps_im=[1e-2, 1e-3])
    assert [(r.eps_r, r.eps_im) for r in rows] == [
        (-2.0, 1e-3), (-2.0, 1e-2), (-1.5, 1e-3), (-1.5, 1e-2), (-1.31, 1e-3), (-1.31, 1e-2)]
    bad = [r for r in rows if r.error]
    assert len(bad) == 2 and all(r.eps_r == -1.31 and math.isnan(r.value) for r in bad)


def test_weak_binding_row_delocalises():
    rows = sweep_figure2([-2.0, -20.0, -200.0], eps_im=[1e-3])
    vals = [r.value for r in rows]  # ascending eps_r: -200, -20, -2
    assert vals[0] > vals[1] > vals[2]


def test_parallel_sweep_is_deterministic(monkeypatch):
    eps_r = np.linspace(-2.0, -1.4, 9)
    monkeypatch.setenv("SPPQM_THREADS", "1")
    assert worker_count() == 1
    serial = sweep_figure1(eps_r)
    monkeypatch.setenv("SPPQM_THREADS", "4")
    assert sweep_figure1(eps_r) == serial
    assert parallel_map(lambda x: x * x, range(10), workers=3) == [x * x for x in range(10)]
