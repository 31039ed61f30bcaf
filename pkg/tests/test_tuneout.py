"""Root finding, contribution ledger, linear depth model."""

import math

import numpy as np
import pytest

from tuneoutkit import (
    Components,
    HyperfineState,
    LightField,
    contribution_ledger,
    find_tuneout,
    linear_model,
    measurable_window,
)
from tuneoutkit.atomic_data import load_species_text
from tuneoutkit.errors import BracketError
from tuneoutkit.polarizability import D_LINES_ONLY
from tuneoutkit.tuneout import default_bracket

from conftest import BEAM_INTENSITY_W_M2


@pytest.fixture(scope="module")
def ledger(species):
    light = LightField(wavelength_nm=790.0, intensity_w_m2=BEAM_INTENSITY_W_M2)
    return contribution_ledger(HyperfineState(1, 0), light, species)


def test_full_model_root_frozen(species, clock_state, beam):
    res = find_tuneout(clock_state, beam, species)
    assert res.wavelength_nm == pytest.approx(790.0184890911911, abs=2e-6)
    assert res.slope_e_r_per_pm == pytest.approx(4.380886626697069, rel=1e-6)
    assert res.n_evaluations >= 96


def test_d_lines_only_root_frozen(species, clock_state, beam):
    res = find_tuneout(clock_state, beam, species, components=D_LINES_ONLY)
    assert res.wavelength_nm == pytest.approx(790.0137399152485, abs=2e-6)


def test_root_independent_of_intensity(species, clock_state):
    """The zero of alpha does not move with beam power, only the slope does."""
    weak = find_tuneout(clock_state, LightField(790.0, 1.0), species)
    strong = find_tuneout(
        clock_state, LightField(790.0, BEAM_INTENSITY_W_M2), species
    )
    assert weak.wavelength_nm == pytest.approx(strong.wavelength_nm, abs=2e-6)
    ratio = strong.slope_e_r_per_pm / weak.slope_e_r_per_pm
    assert ratio == pytest.approx(BEAM_INTENSITY_W_M2, rel=1e-6)


def test_ledger_rows_frozen(ledger):
    frozen = {
        "d_lines_scalar_root": (790.0137399152485, "root"),
        "tensor_shift": (0.09112369377817231, "shift"),
        "residual_6p_plus_shift": (1.2030151294766256, "shift"),
        "residual_core_valence_shift": (3.4550371193518004, "shift"),
        "total_root": (790.0184890911911, "root"),
        "total_shift": (4.749175942606598, "shift"),
    }
    assert [r.name for r in ledger.rows] == list(frozen)
    for name, (value, kind) in frozen.items():
        row = ledger.row(name)
        assert row.kind == kind
        tol = 4e-6 if kind == "root" else 4e-3  # nm resp. pm
        assert row.value == pytest.approx(value, abs=tol)
    assert ledger.dataset == "Rb-87/ratio"


def test_ledger_shifts_telescope_exactly(ledger):
    assert ledger.additivity_defect_pm == 0.0
    total = ledger.row("total_shift").value
    parts = sum(
        ledger.row(n).value
        for n in ("tensor_shift", "residual_6p_plus_shift", "residual_core_valence_shift")
    )
    assert total == pytest.approx(parts, abs=1e-12)


def test_ledger_uncertainties_frozen(ledger):
    frozen = {
        "d_lines_scalar_root": 1.9844296749624414e-05,
        "tensor_shift": 4.1870745821449515e-06,
        "residual_6p_plus_shift": 0.047963921312403034,
        "residual_core_valence_shift": 0.0380339653969833,
        "total_root": 6.435595789182645e-05,
        "total_shift": 0.06116857194514829,
    }
    for name, unc in frozen.items():
        assert ledger.row(name).unc == pytest.approx(unc, rel=0.02), name


def test_ledger_monte_carlo_cross_check(species, ledger):
    """Seeded MC propagation agrees with the perturbation route in magnitude."""
    light = LightField(wavelength_nm=790.0, intensity_w_m2=BEAM_INTENSITY_W_M2)
    mc = contribution_ledger(
        HyperfineState(1, 0), light, species,
        propagate=False, mc_samples=16, seed=20260823,
    )
    for name in ("residual_6p_plus_shift", "residual_core_valence_shift", "total_root"):
        ratio = mc.row(name).unc / ledger.row(name).unc
        assert 0.5 < ratio < 2.0, (name, ratio)


def test_vector_root_displacement_antisymmetric(species, beam):
    """Full circular light pushes the m_F = +-1 roots oppositely by ~2.5 nm."""
    base = find_tuneout(HyperfineState(1, 0), beam, species).wavelength_nm
    circ = LightField(790.0, BEAM_INTENSITY_W_M2, pol_angle=math.pi / 4)
    up = find_tuneout(HyperfineState(1, 1), circ, species).wavelength_nm
    down = find_tuneout(HyperfineState(1, -1), circ, species).wavelength_nm
    assert up == pytest.approx(787.5572, abs=1e-3)
    assert down == pytest.approx(792.4896, abs=1e-3)
    assert abs(up - base) > 2.0 and abs(down - base) > 2.0
    # swapping the handedness swaps the two roots
    anti = LightField(790.0, BEAM_INTENSITY_W_M2, pol_angle=-math.pi / 4)
    assert find_tuneout(HyperfineState(1, 1), anti, species).wavelength_nm == pytest.approx(
        down, abs=1e-5
    )


def test_default_bracket_widens_for_vector(species):
    circ = LightField(790.0, 1.0, pol_angle=math.pi / 4)
    lin = LightField(790.0, 1.0)
    assert default_bracket(HyperfineState(1, 1), circ) == (782.0, 794.5)
    assert default_bracket(HyperfineState(1, 1), lin) == (785.0, 794.0)


def test_bracket_errors(species, clock_state, beam):
    with pytest.raises(BracketError, match="change sign"):
        find_tuneout(clock_state, beam, species, bracket=(786.0, 788.0))
    with pytest.raises(BracketError, match="empty"):
        find_tuneout(clock_state, beam, species, bracket=(790.5, 790.4))


TOY_SPLIT = """\
format = species-data/1

[species]
name = Toyium
mass_kg = 1.44e-25 ! toy
nuclear_spin = 3/2 ! toy

[scalar_residuals]
alpha_6p_plus_au = 0 ! toy
alpha_core_valence_au = 0 ! toy

[line D1]
lower_level = 5S1/2
upper_level = 5P1/2
frequency_hz = 3.771e14 ! toy
lower_a_hfs_hz = 3.4e9 ! toy
lower_b_hfs_hz = 0 ! toy
upper_a_hfs_hz = 4.1e8 ! toy
upper_b_hfs_hz = 0 ! toy

[line D2]
lower_level = 5S1/2
upper_level = 5P3/2
frequency_hz = 3.842e14 ! toy
lower_a_hfs_hz = 3.4e9 ! toy
lower_b_hfs_hz = 0 ! toy
upper_a_hfs_hz = 6.0e10 ! toy
upper_b_hfs_hz = 0 ! toy

[matrix_elements]
parametrization = ratio
d32_ea0 = 4.2 ! toy
ratio_R = 2.0 ! toy
d12_ea0 = 3.0 ! toy
"""


def test_several_roots_are_reported():
    """A hugely split upper level produces several zeros inside one window."""
    toy = load_species_text(TOY_SPLIT, path="<toy>")
    light = LightField(780.0, 1.0)
    with pytest.raises(BracketError, match="several"):
        find_tuneout(HyperfineState(1, 0), light, toy, bracket=(779.8, 781.2))


def test_measurable_window_frozen(species, clock_state, beam):
    lo, hi = measurable_window(clock_state, beam, species)
    assert lo == pytest.approx(789.9899560542395, abs=1e-5)
    assert hi == pytest.approx(790.0470221281427, abs=1e-5)
    # halving the depth ceiling halves the reach
    lo2, hi2 = measurable_window(clock_state, beam, species, max_depth_e_r=62.5)
    assert hi2 - lo2 == pytest.approx(0.5 * (hi - lo), rel=1e-6)


def test_linear_model_frozen(species, clock_state, beam):
    lin = linear_model(clock_state, beam, species)
    assert lin.window_nm[0] == pytest.approx(789.9899560542395, abs=1e-5)
    assert lin.lambda0_nm == pytest.approx(790.018460507598, abs=1e-4)
    assert lin.slope_e_r_per_pm == pytest.approx(4.380953753688003, rel=1e-4)
    assert lin.max_rel_deviation == pytest.approx(0.0019783168484767315, abs=1e-4)
    # the straight line stays within a quarter percent over the usable window
    assert lin.max_rel_deviation < 0.0025


def test_linear_model_custom_grid(species, clock_state, beam):
    grid = np.linspace(790.01, 790.03, 21)
    lin = linear_model(clock_state, beam, species, wavelengths_nm=grid)
    assert lin.window_nm == (790.01, 790.03)
    # a 20 pm window brackets the crossing tightly; deviation collapses
    assert lin.max_rel_deviation < 1e-3
    assert lin.lambda0_nm == pytest.approx(790.0184890911911, abs=1e-5)
