"""Tune-out wavelength location and the contribution ledger.

A tune-out is the root of the geometry-weighted polarizability between the
D lines.  The ledger splits the full-model root into the bare two-line
scalar root plus the successive shifts from the tensor component, the
5s-6p-and-higher residual, and the core residual, and propagates the data
file uncertainties onto every entry by one-sided finite differences (a
seeded Monte-Carlo propagation is available as a cross check).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .atomic_data import HyperfineState, SpeciesData, uncertain_data, with_value
from .errors import BracketError, ComputationError, ResonanceGuardError
from .polarizability import (
    ALL_COMPONENTS,
    Components,
    LightField,
    effective_polarizability,
    lattice_depth,
    polarization_params,
)

D_LINE_WINDOW_NM = (780.5, 794.5)


@dataclass(frozen=True)
class TuneoutResult:
    wavelength_nm: float
    slope_e_r_per_pm: float      # lattice depth slope at the root, given beam
    bracket_nm: tuple
    components: Components
    n_evaluations: int


@dataclass(frozen=True)
class LedgerRow:
    name: str
    value: float                 # nm for roots, pm for shifts
    unc: float
    kind: str                    # "root" or "shift"


@dataclass(frozen=True)
class ContributionLedger:
    dataset: str                 # species name + matrix-element parametrization
    rows: tuple
    additivity_defect_pm: float

    def row(self, name) -> LedgerRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def default_bracket(state: HyperfineState, light: LightField):
    """Window for F=1-type roots; wide when the vector term is active."""
    params = polarization_params(light)
    vector_pull = abs(params.circular_projection * float(state.m_f))
    if vector_pull > 0.05:
        return (782.0, 794.5)
    return (785.0, 794.0)


def _retuned(light: LightField, wavelength_nm: float) -> LightField:
    return LightField(
        wavelength_nm=wavelength_nm,
        intensity_w_m2=light.intensity_w_m2,
        pol_angle=light.pol_angle,
        k_angle=light.k_angle,
        pol_axis_angle=light.pol_axis_angle,
    )


def find_tuneout(
    state: HyperfineState,
    light: LightField,
    species: SpeciesData,
    components: Components = ALL_COMPONENTS,
    bracket=None,
    xtol_nm: float = 1e-6,
    scan_points: int = 96,
) -> TuneoutResult:
    """Locate the single polarizability zero inside `bracket`.

    The bracket is first scanned on a grid; zero or several sign changes
    raise BracketError (listing each root found) instead of silently
    returning one of them.
    """
    if bracket is None:
        bracket = default_bracket(state, light)
    lo, hi = bracket
    if not lo < hi:
        raise BracketError(f"empty bracket ({lo}, {hi}) nm")
    evals = 0

    def alpha(lam):
        nonlocal evals
        evals += 1
        return effective_polarizability(state, _retuned(light, lam), species, components)

    grid = np.linspace(lo, hi, scan_points)
    values = [alpha(x) for x in grid]
    crossings = [
        (grid[k], grid[k + 1])
        for k in range(len(grid) - 1)
        if values[k] == 0.0 or (values[k] < 0) != (values[k + 1] < 0)
    ]
    if not crossings:
        raise BracketError(
            f"no tune-out inside ({lo}, {hi}) nm: polarizability does not change sign"
        )
    if len(crossings) > 1:
        marks = []
        for a, b in crossings:
            try:
                marks.append(f"{brentq(alpha, a, b, xtol=1e-4):.4f}")
            except ResonanceGuardError:
                # sign flip across a resonance pole, not a usable root
                marks.append(f"resonance near {0.5 * (a + b):.4f}")
        raise BracketError(
            "several sign changes inside ({}, {}) nm: {}".format(
                lo, hi, ", ".join(marks)
            )
        )
    root = brentq(alpha, crossings[0][0], crossings[0][1], xtol=xtol_nm)

    h = 5e-5  # nm; central difference well above the root tolerance
    v_hi = lattice_depth(state, _retuned(light, root + h), species, components).e_r
    v_lo = lattice_depth(state, _retuned(light, root - h), species, components).e_r
    slope = (v_hi - v_lo) / (2.0 * h * 1e3)  # per pm
    return TuneoutResult(root, slope, (lo, hi), components, evals)


def _refine_near(state, light, species, components, guess, halfwidth_nm=0.08):
    """Fast re-root for perturbed data, bracketing around a known root."""
    for widen in (1.0, 4.0, 16.0):
        try:
            res = find_tuneout(
                state, light, species, components,
                bracket=(guess - halfwidth_nm * widen, guess + halfwidth_nm * widen),
                scan_points=8,
            )
            return res.wavelength_nm
        except BracketError:
            continue
    raise ComputationError(f"lost the tune-out root near {guess:.6f} nm after perturbation")


_LEDGER_STAGES = (
    ("d_lines_scalar", Components(tensor=False, residual_6p=False, residual_core=False)),
    ("tensor", Components(tensor=True, residual_6p=False, residual_core=False)),
    ("residual_6p_plus", Components(tensor=True, residual_6p=True, residual_core=False)),
    ("residual_core_valence", Components(tensor=True, residual_6p=True, residual_core=True)),
)


def _stage_roots(state, light, species, guesses=None):
    roots = []
    for k, (_, comp) in enumerate(_LEDGER_STAGES):
        if guesses is None:
            roots.append(find_tuneout(state, light, species, comp).wavelength_nm)
        else:
            roots.append(_refine_near(state, light, species, comp, guesses[k]))
    return roots


def _ledger_values(roots):
    """(base root, three shifts in pm, total root, shift sum in pm)."""
    shifts = [(roots[k + 1] - roots[k]) * 1e3 for k in range(3)]
    return [roots[0]] + shifts + [roots[-1], (roots[-1] - roots[0]) * 1e3]


def contribution_ledger(
    state: HyperfineState,
    light: LightField,
    species: SpeciesData,
    propagate: bool = True,
    mc_samples: int = 0,
    seed: int | None = None,
) -> ContributionLedger:
    """Split the tune-out into its model contributions with uncertainties."""
    roots = _stage_roots(state, light, species)
    central = _ledger_values(roots)

    uncs = [0.0] * len(central)
    if propagate:
        sens_sq = np.zeros(len(central))
        for key, datum in uncertain_data(species):
            pert = with_value(species, key, datum.value + datum.unc)
            pvals = _ledger_values(_stage_roots(state, light, pert, guesses=roots))
            sens_sq += (np.asarray(pvals) - np.asarray(central)) ** 2
        uncs = np.sqrt(sens_sq).tolist()
    if mc_samples:
        rng = np.random.default_rng(seed)
        draws = []
        for _ in range(mc_samples):
            pert = species
            for key, datum in uncertain_data(species):
                pert = with_value(pert, key, rng.normal(datum.value, datum.unc))
            draws.append(_ledger_values(_stage_roots(state, light, pert, guesses=roots)))
        uncs = np.std(np.asarray(draws), axis=0, ddof=1).tolist()

    names = (
        ("d_lines_scalar_root", "root"),
        ("tensor_shift", "shift"),
        ("residual_6p_plus_shift", "shift"),
        ("residual_core_valence_shift", "shift"),
        ("total_root", "root"),
        ("total_shift", "shift"),
    )
    rows = tuple(
        LedgerRow(name, central[k], uncs[k], kind)
        for k, (name, kind) in enumerate(names)
    )
    defect = abs(central[5] - (central[1] + central[2] + central[3]))
    return ContributionLedger(
        dataset=f"{species.name}/{species.parametrization}",
        rows=rows,
        additivity_defect_pm=defect,
    )


@dataclass(frozen=True)
class LinearDepthModel:
    lambda0_nm: float            # zero crossing of the fitted line
    slope_e_r_per_pm: float
    max_rel_deviation: float     # of the line from direct evaluation
    window_nm: tuple


def measurable_window(
    state, light, species,
    components: Components = ALL_COMPONENTS,
    max_depth_e_r: float = None,
) -> tuple:
    """Wavelength window around the tune-out where depths stay extractable.

    Diffraction-based depth readout is only trustworthy while the lattice is
    within the thin-grating regime, so the usable scan range at a given
    intensity is bounded by the detuning at which |V0| hits that ceiling.
    """
    if max_depth_e_r is None:
        from .kd import THIN_GRATING_MAX_DEPTH_E_R
        max_depth_e_r = THIN_GRATING_MAX_DEPTH_E_R
    res = find_tuneout(state, light, species, components)
    half_nm = max_depth_e_r / abs(res.slope_e_r_per_pm) / 1e3
    return (res.wavelength_nm - half_nm, res.wavelength_nm + half_nm)


def linear_model(
    state, light, species, wavelengths_nm=None,
    components: Components = ALL_COMPONENTS,
    points: int = 201,
) -> LinearDepthModel:
    """Straight-line model of the lattice depth across a narrow window.

    With no explicit grid the window defaults to measurable_window(), the
    span a depth scan at this intensity can actually cover.  The deviation
    is the largest residual from the least-squares line, normalized to the
    largest |V0| on the grid; V0 itself crosses zero inside the window, so
    a pointwise self-relative measure would blow up at the crossing.
    """
    if wavelengths_nm is None:
        lo, hi = measurable_window(state, light, species, components)
        lams = np.linspace(lo, hi, points)
    else:
        lams = np.asarray(wavelengths_nm, dtype=float)
    if lams.size < 3:
        raise ComputationError("need at least 3 wavelengths for the linear depth model")
    depths = np.array(
        [lattice_depth(state, _retuned(light, lam), species, components).e_r for lam in lams]
    )
    coeffs = np.polyfit(lams, depths, 1)
    fitted = np.polyval(coeffs, lams)
    scale = float(np.max(np.abs(depths)))
    if scale == 0.0:
        raise ComputationError("lattice depth vanishes on the whole grid")
    max_rel = float(np.max(np.abs(fitted - depths)) / scale)
    slope_nm = float(coeffs[0])
    return LinearDepthModel(
        lambda0_nm=float(-coeffs[1] / coeffs[0]) if coeffs[0] != 0 else math.nan,
        slope_e_r_per_pm=slope_nm / 1e3,
        max_rel_deviation=max_rel,
        window_nm=(float(lams[0]), float(lams[-1])),
    )
