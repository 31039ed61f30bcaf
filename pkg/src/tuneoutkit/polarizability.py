"""Hyperfine-resolved dynamic polarizabilities and ac Stark shifts.

The lattice potential for a ground sublevel |F, m_F> in a light field with
amplitude E0 is

    V = -(E0/2)^2 [ alpha_s + C (m_F / 2F) alpha_v
                    - D (3 m_F^2 - F(F+1)) / (2F(2F-1)) alpha_t ]

with C = A cos(theta_k), D = (3 cos^2(theta_p) - 1)/2, and A = sin(2 theta0)
the degree of circular polarization.  The three polarizability components are
hyperfine sums over both D lines including counter-rotating terms:

    alpha_K = sqrt(2K+1) sum_{F'} (-1)^(F+F'+K+1) {1 K 1; F F' F}
              |<F||d||F'>|^2 [ 1/(w_F'F - w) + (-1)^K / (w_F'F + w) ]

mapped onto (scalar, vector, tensor) with the usual F-dependent prefactors.
For J = 1/2 ground states the tensor component is nonzero only because the
hyperfine splitting breaks the degeneracy of the F' levels; it is small but
resolvable at a tune-out.  Everything internal is in atomic units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .atomic_data import (
    HyperfineState,
    SpeciesData,
    excited_f_values,
    reduced_hf_matrix_element,
    transition_frequency,
)
from .constants import CODATA2018 as K
from .errors import ResonanceGuardError, ValidationError
from .wigner import wigner_6j

# 10 natural linewidths of the D lines (Gamma/2pi is about 6 MHz for both)
RESONANCE_GUARD_HZ = 60.0e6

_AU_OMEGA = K.au_angular_frequency  # rad/s per atomic unit


@dataclass(frozen=True)
class LightField:
    """Monochromatic light: wavelength, single-beam intensity, geometry.

    Angles are radians: `pol_angle` (theta0) sets the polarization ellipse
    e = ex cos(theta0) + i ey sin(theta0), `k_angle` (theta_k) is between
    the propagation direction and the quantization axis, `pol_axis_angle`
    (theta_p) between the linear polarization component and the
    quantization axis.
    """

    wavelength_nm: float
    intensity_w_m2: float
    pol_angle: float = 0.0
    k_angle: float = 0.0
    pol_axis_angle: float = math.pi / 2

    def __post_init__(self):
        if not self.wavelength_nm > 0:
            raise ValidationError(f"wavelength must be positive, got {self.wavelength_nm} nm")
        if self.intensity_w_m2 < 0:
            raise ValidationError(f"intensity must be non-negative, got {self.intensity_w_m2}")

    @property
    def angular_frequency(self) -> float:
        return 2.0 * math.pi * K.c / (self.wavelength_nm * 1e-9)

    @property
    def e0_squared(self) -> float:
        """Square of the field amplitude E0, (V/m)^2, I = c eps0 E0^2 / 2."""
        return 2.0 * self.intensity_w_m2 / (K.c * K.eps0)


@dataclass(frozen=True)
class PolarizationParams:
    """Geometry weights of the three polarizability components."""

    circular_degree: float      # A = sin(2 theta0), in [-1, 1]
    circular_projection: float  # C = A cos(theta_k)
    tensor_alignment: float     # D = (3 cos^2(theta_p) - 1) / 2


def polarization_params(light: LightField) -> PolarizationParams:
    a = math.sin(2.0 * light.pol_angle)
    return PolarizationParams(
        circular_degree=a,
        circular_projection=a * math.cos(light.k_angle),
        tensor_alignment=0.5 * (3.0 * math.cos(light.pol_axis_angle) ** 2 - 1.0),
    )


@dataclass(frozen=True)
class PolarizabilitySet:
    """Scalar, vector, tensor dynamic polarizabilities in atomic units."""

    scalar: float
    vector: float
    tensor: float


@dataclass(frozen=True)
class Components:
    """Model-term toggles used by the tune-out contribution ledger."""

    tensor: bool = True
    vector: bool = True
    residual_6p: bool = True
    residual_core: bool = True


ALL_COMPONENTS = Components()
D_LINES_ONLY = Components(tensor=False, residual_6p=False, residual_core=False)


def _component_weights(f: Fraction, k_rank: int) -> float:
    f = Fraction(f)
    tf = float(f)
    if k_rank == 0:
        return 1.0 / math.sqrt(3.0 * (2 * tf + 1))
    if k_rank == 1:
        if f == 0:
            return 0.0
        return -math.sqrt(2 * tf / ((tf + 1) * (2 * tf + 1)))
    if f in (Fraction(0), Fraction(1, 2)):
        return 0.0
    # normalized so that the potential uses the tensor weight
    # -D (3 m^2 - F(F+1)) / (2F(2F-1)); twice the common single-F convention
    return 2.0 * math.sqrt(
        2 * tf * (2 * tf - 1) / (3.0 * (tf + 1) * (2 * tf + 1) * (2 * tf + 3))
    )


def check_resonance_guard(state, wavelength_nm, species, guard_hz=RESONANCE_GUARD_HZ):
    """Raise if the light sits within `guard_hz` of any hyperfine line."""
    nu = K.c / (wavelength_nm * 1e-9)
    i = species.nuclear_spin
    for line in species.lines:
        for f_up in excited_f_values(i, line.j_upper):
            if reduced_hf_matrix_element(line, i, state.f, f_up) == 0.0:
                continue
            det = nu - transition_frequency(line, i, state.f, f_up)
            if abs(det) < guard_hz:
                raise ResonanceGuardError(
                    wavelength_nm, f"{line.label} F={state.f}->F'={f_up}", det, guard_hz
                )


def d_line_polarizabilities(
    state: HyperfineState,
    wavelength_nm: float,
    species: SpeciesData,
    guard_hz: float = RESONANCE_GUARD_HZ,
) -> PolarizabilitySet:
    """D-line contribution to (scalar, vector, tensor), atomic units.

    The components do not depend on m_F; geometry enters only through the
    weights in `ac_stark_shift`.
    """
    check_resonance_guard(state, wavelength_nm, species, guard_hz)
    f = Fraction(state.f)
    i = species.nuclear_spin
    omega = 2.0 * math.pi * K.c / (wavelength_nm * 1e-9) / _AU_OMEGA

    alpha_k = [0.0, 0.0, 0.0]
    for line in species.lines:
        for f_up in excited_f_values(i, line.j_upper):
            d_f = reduced_hf_matrix_element(line, i, f, f_up)
            if d_f == 0.0:
                continue
            w0 = 2.0 * math.pi * transition_frequency(line, i, f, f_up) / _AU_OMEGA
            co = 1.0 / (w0 - omega)
            counter = 1.0 / (w0 + omega)
            for k_rank in range(3):
                six = wigner_6j(1, k_rank, 1, f, f_up, f)
                if six == 0.0:
                    continue
                phase = -1.0 if int(f + f_up + k_rank + 1) % 2 else 1.0
                denom = co + (counter if k_rank % 2 == 0 else -counter)
                alpha_k[k_rank] += (
                    math.sqrt(2 * k_rank + 1) * phase * six * d_f * d_f * denom
                )

    return PolarizabilitySet(
        scalar=_component_weights(f, 0) * alpha_k[0],
        vector=_component_weights(f, 1) * alpha_k[1],
        tensor=_component_weights(f, 2) * alpha_k[2],
    )


def scalar_residuals_au(species: SpeciesData, components: Components = ALL_COMPONENTS) -> float:
    total = 0.0
    if components.residual_6p:
        total += species.alpha_6p_plus.value
    if components.residual_core:
        total += species.alpha_core_valence.value
    return total


def polarizability_set(
    state, wavelength_nm, species,
    components: Components = ALL_COMPONENTS,
    guard_hz: float = RESONANCE_GUARD_HZ,
) -> PolarizabilitySet:
    """Full (scalar, vector, tensor) with residuals and toggles applied."""
    dl = d_line_polarizabilities(state, wavelength_nm, species, guard_hz)
    return PolarizabilitySet(
        scalar=dl.scalar + scalar_residuals_au(species, components),
        vector=dl.vector if components.vector else 0.0,
        tensor=dl.tensor if components.tensor else 0.0,
    )


def stark_weights(state: HyperfineState, params: PolarizationParams):
    """(vector weight, tensor weight) multiplying alpha_v and alpha_t."""
    f, m = Fraction(state.f), Fraction(state.m_f)
    w_v = 0.0
    if f != 0:
        w_v = params.circular_projection * float(m) / (2.0 * float(f))
    w_t = 0.0
    if f not in (Fraction(0), Fraction(1, 2)):
        w_t = (
            -params.tensor_alignment
            * float(3 * m * m - f * (f + 1))
            / float(2 * f * (2 * f - 1))
        )
    return w_v, w_t


@dataclass(frozen=True)
class StarkShift:
    """ac Stark shift of one sublevel in one light field."""

    joules: float
    hz: float
    e_r: float                     # in recoil energies at the light wavelength
    effective_alpha_au: float      # geometry-weighted polarizability
    pol: PolarizabilitySet
    params: PolarizationParams


def recoil_energy_hz(wavelength_nm: float, mass_kg: float) -> float:
    """Photon recoil energy h / (2 m lambda^2) in Hz."""
    lam = wavelength_nm * 1e-9
    return K.h / (2.0 * mass_kg * lam * lam)


def effective_polarizability(
    state, light, species,
    components: Components = ALL_COMPONENTS,
    guard_hz: float = RESONANCE_GUARD_HZ,
) -> float:
    """Geometry-weighted polarizability (atomic units) entering V."""
    pol = polarizability_set(state, light.wavelength_nm, species, components, guard_hz)
    params = polarization_params(light)
    w_v, w_t = stark_weights(state, params)
    return pol.scalar + w_v * pol.vector + w_t * pol.tensor


def ac_stark_shift(
    state, light, species,
    components: Components = ALL_COMPONENTS,
    guard_hz: float = RESONANCE_GUARD_HZ,
) -> StarkShift:
    """ac Stark shift of |F, m_F> in a single beam of the given intensity."""
    pol = polarizability_set(state, light.wavelength_nm, species, components, guard_hz)
    params = polarization_params(light)
    w_v, w_t = stark_weights(state, params)
    alpha_eff = pol.scalar + w_v * pol.vector + w_t * pol.tensor
    v_joules = -(light.e0_squared / 4.0) * alpha_eff * K.au_polarizability
    v_hz = v_joules / K.h
    e_r = recoil_energy_hz(light.wavelength_nm, species.mass.value)
    return StarkShift(v_joules, v_hz, v_hz / e_r, alpha_eff, pol, params)


def lattice_depth(
    state, beam: LightField, species,
    components: Components = ALL_COMPONENTS,
    guard_hz: float = RESONANCE_GUARD_HZ,
) -> StarkShift:
    """Depth V0 of the retro-reflected lattice formed by `beam`.

    The counterpropagating pair doubles the field at the antinodes, so the
    peak intensity is four times the single-beam intensity.
    """
    peak = LightField(
        wavelength_nm=beam.wavelength_nm,
        intensity_w_m2=4.0 * beam.intensity_w_m2,
        pol_angle=beam.pol_angle,
        k_angle=beam.k_angle,
        pol_axis_angle=beam.pol_axis_angle,
    )
    return ac_stark_shift(state, peak, species, components, guard_hz)
