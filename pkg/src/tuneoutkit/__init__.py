"""Hyperfine-resolved light shifts, tune-out location, and the matching
diffraction / absorption-imaging analysis chain for Rb-87.

The modules split along the experiment's stages:

- ``atomic_data``: species data files, hyperfine levels and line lists
- ``polarizability``: scalar/vector/tensor light shifts and lattice depths
- ``tuneout``: zero-crossing location and the per-term contribution budget
- ``kd``: pulsed-grating diffraction, thin-grating bounds, depth inversion
- ``imaging``: synthetic shots, reference composition, OD, peak fitting
- ``fit_models``: folded-noise scan models, polarization and field fits
- ``cli``: batch front end writing JSONL records, CSV tables and figures
"""

from .atomic_data import HyperfineState, SpeciesData, load_species_data
from .errors import (
    BracketError,
    ComputationError,
    DataFileError,
    FitNonConvergenceError,
    ResonanceGuardError,
    ToolkitError,
    UnidentifiableFitError,
    ValidationError,
)
from .polarizability import (
    Components,
    LightField,
    PolarizabilitySet,
    StarkShift,
    ac_stark_shift,
    effective_polarizability,
    lattice_depth,
    polarizability_set,
    recoil_energy_hz,
)
from .tuneout import (
    ContributionLedger,
    LinearDepthModel,
    TuneoutResult,
    contribution_ledger,
    find_tuneout,
    linear_model,
    measurable_window,
)

__all__ = [
    "HyperfineState",
    "SpeciesData",
    "load_species_data",
    "ToolkitError",
    "ValidationError",
    "DataFileError",
    "ComputationError",
    "ResonanceGuardError",
    "BracketError",
    "FitNonConvergenceError",
    "UnidentifiableFitError",
    "Components",
    "LightField",
    "PolarizabilitySet",
    "StarkShift",
    "ac_stark_shift",
    "effective_polarizability",
    "lattice_depth",
    "polarizability_set",
    "recoil_energy_hz",
    "ContributionLedger",
    "LinearDepthModel",
    "TuneoutResult",
    "contribution_ledger",
    "find_tuneout",
    "linear_model",
    "measurable_window",
]

__version__ = "0.1.0"
