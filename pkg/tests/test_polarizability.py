"""Polarizability components, geometry weights, Stark shifts, recoil."""

import math

import numpy as np
import pytest

from tuneoutkit import (
    Components,
    HyperfineState,
    LightField,
    ac_stark_shift,
    effective_polarizability,
    lattice_depth,
    polarizability_set,
    recoil_energy_hz,
)
from tuneoutkit.errors import ResonanceGuardError, ValidationError
from tuneoutkit.polarizability import (
    check_resonance_guard,
    d_line_polarizabilities,
    polarization_params,
    scalar_residuals_au,
    stark_weights,
)

from _oracles import oracle_polarizabilities, sublevel_alpha

from conftest import BEAM_INTENSITY_W_M2


def test_light_field_validation():
    with pytest.raises(ValidationError):
        LightField(wavelength_nm=-5.0, intensity_w_m2=1.0)
    with pytest.raises(ValidationError):
        LightField(wavelength_nm=790.0, intensity_w_m2=-1.0)


def test_field_amplitude_relation():
    from tuneoutkit.constants import CODATA2018 as K

    light = LightField(wavelength_nm=790.0, intensity_w_m2=1.0e4)
    assert 0.5 * K.c * K.eps0 * light.e0_squared == pytest.approx(1.0e4, rel=1e-12)
    assert light.angular_frequency == pytest.approx(
        2.0 * math.pi * K.c / 790.0e-9, rel=1e-12
    )


def test_polarization_params_canonical_geometries():
    lin = polarization_params(LightField(790.0, 1.0, pol_angle=0.0))
    assert lin.circular_degree == 0.0
    assert lin.circular_projection == 0.0
    assert lin.tensor_alignment == pytest.approx(-0.5)  # linear pol normal to z

    circ = polarization_params(LightField(790.0, 1.0, pol_angle=math.pi / 4))
    assert circ.circular_degree == pytest.approx(1.0)
    assert circ.circular_projection == pytest.approx(1.0)

    tilted = polarization_params(
        LightField(790.0, 1.0, pol_angle=math.pi / 4, k_angle=math.pi / 3)
    )
    assert tilted.circular_projection == pytest.approx(0.5, abs=1e-12)

    aligned = polarization_params(LightField(790.0, 1.0, pol_axis_angle=0.0))
    assert aligned.tensor_alignment == pytest.approx(1.0)


def test_stark_weights_f1(species):
    params = polarization_params(LightField(790.0, 1.0, pol_angle=math.pi / 4))
    w_v, w_t = stark_weights(HyperfineState(1, 1), params)
    assert w_v == pytest.approx(0.5)        # C * m / (2F) with C = 1
    # tensor weight -D (3m^2 - F(F+1)) / (2F(2F-1)); D = -1/2 for this beam
    assert w_t == pytest.approx(0.25)
    w_v0, w_t0 = stark_weights(HyperfineState(1, 0), params)
    assert w_v0 == 0.0
    assert w_t0 == pytest.approx(-0.5)
    # the m_F = +-1 pair is symmetric in the tensor, antisymmetric in the vector
    w_vm, w_tm = stark_weights(HyperfineState(1, -1), params)
    assert w_vm == -w_v and w_tm == w_t


def test_components_independent_of_m_f(species):
    a = d_line_polarizabilities(HyperfineState(2, 2), 788.0, species)
    b = d_line_polarizabilities(HyperfineState(2, 0), 788.0, species)
    assert a == b


@pytest.mark.parametrize("f", [1, 2])
@pytest.mark.parametrize("lam", [778.0, 785.5, 790.0185, 799.0])
def test_components_match_oracle(species, f, lam):
    """Factorized components against raw second-order perturbation theory."""
    s, v, t, resid = oracle_polarizabilities(f, lam, species)
    assert resid < 1e-9 * max(abs(s), abs(v), abs(t))
    dl = d_line_polarizabilities(HyperfineState(f, 0), lam, species)
    scale = max(abs(s), abs(v), abs(t))
    assert abs(dl.scalar - s) / scale < 1e-12
    assert abs(dl.vector - v) / scale < 1e-12
    assert abs(dl.tensor - t) / scale < 1e-12


def test_sublevel_shift_matches_oracle_directly(species):
    """Full weighted sublevel alpha for sigma+ light along z."""
    lam = 787.3
    light = LightField(lam, 1.0, pol_angle=math.pi / 4, k_angle=0.0)
    s2 = 1.0 / math.sqrt(2.0)
    for m in (-1, 0, 1):
        ours = effective_polarizability(HyperfineState(1, m), light, species)
        # oracle has no residual terms; subtract them before comparing
        ours -= scalar_residuals_au(species)
        ref = sublevel_alpha(1, m, lam, species, (s2, 1.0j * s2, 0.0))
        assert ours == pytest.approx(ref, rel=1e-10)


def test_residual_toggles(species):
    st = HyperfineState(1, 0)
    full = polarizability_set(st, 790.0, species)
    bare = polarizability_set(
        st, 790.0, species, Components(residual_6p=False, residual_core=False)
    )
    assert full.scalar - bare.scalar == pytest.approx(
        species.alpha_6p_plus.value + species.alpha_core_valence.value
    )
    no_tensor = polarizability_set(st, 790.0, species, Components(tensor=False))
    assert no_tensor.tensor == 0.0
    assert no_tensor.scalar == full.scalar


def test_zero_intensity_zero_shift(species):
    light = LightField(790.0, 0.0)
    shift = ac_stark_shift(HyperfineState(1, 0), light, species)
    assert shift.joules == 0.0
    assert shift.hz == 0.0
    assert shift.e_r == 0.0


def test_lattice_depth_is_four_single_beam_shifts(species):
    st = HyperfineState(1, 0)
    beam = LightField(789.5, BEAM_INTENSITY_W_M2)
    single = ac_stark_shift(st, beam, species)
    lattice = lattice_depth(st, beam, species)
    assert lattice.e_r == pytest.approx(4.0 * single.e_r, rel=1e-12)
    assert lattice.effective_alpha_au == pytest.approx(
        single.effective_alpha_au, rel=1e-12
    )


def test_recoil_energy_frozen(species):
    assert recoil_energy_hz(790.0185, species.mass.value) == pytest.approx(
        3678.212644338957, rel=1e-12
    )
    # recoil scales as 1 / lambda^2
    assert recoil_energy_hz(2.0 * 790.0185, species.mass.value) == pytest.approx(
        3678.212644338957 / 4.0, rel=1e-12
    )


def test_resonance_guard_fires_on_component(species):
    st = HyperfineState(1, 0)
    with pytest.raises(ResonanceGuardError) as err:
        check_resonance_guard(st, 780.2331488583935, species)
    assert "D2" in str(err.value)
    assert err.value.line_label.startswith("D2")
    # the guard is hyperfine resolved: the D2 centroid itself is ~2.6 GHz
    # from the nearest F=1 component, outside a 60 MHz guard
    check_resonance_guard(st, 780.241209686, species)


def test_guard_width_adjustable(species):
    st = HyperfineState(1, 0)
    with pytest.raises(ResonanceGuardError):
        check_resonance_guard(st, 780.241209686, species, guard_hz=1.0e10)


def test_effective_polarizability_consistent_with_shift(species):
    st = HyperfineState(1, -1)
    light = LightField(791.3, BEAM_INTENSITY_W_M2, pol_angle=0.2, k_angle=0.1)
    from tuneoutkit.constants import CODATA2018 as K

    alpha = effective_polarizability(st, light, species)
    shift = ac_stark_shift(st, light, species)
    assert shift.effective_alpha_au == pytest.approx(alpha, rel=1e-12)
    expect_j = -(light.e0_squared / 4.0) * alpha * K.au_polarizability
    assert shift.joules == pytest.approx(expect_j, rel=1e-12)


def test_scalar_dominates_near_800(species):
    """Far red of both lines the scalar part is positive and large."""
    pol = polarizability_set(HyperfineState(1, 0), 805.0, species)
    assert pol.scalar > 0
    assert abs(pol.tensor) < 1e-3 * pol.scalar
