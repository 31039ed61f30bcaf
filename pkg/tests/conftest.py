"""Shared fixtures: the bundled species dataset and the standard beam."""

import math

import pytest
from importlib import resources

from tuneoutkit import HyperfineState, LightField, load_species_data

# 450 mW in a 29 um waist, I = 2 P / (pi w^2)
BEAM_INTENSITY_W_M2 = 2.0 * 0.450 / (math.pi * (29e-6) ** 2)


@pytest.fixture(scope="session")
def species():
    return load_species_data(resources.files("tuneoutkit") / "data" / "rb87.species")


@pytest.fixture(scope="session")
def clock_state():
    return HyperfineState(1, 0)


@pytest.fixture()
def beam():
    """Linearly polarized beam at the standard power and waist."""
    return LightField(wavelength_nm=790.0, intensity_w_m2=BEAM_INTENSITY_W_M2)
