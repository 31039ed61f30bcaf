"""Exception types shared across the toolkit.

The CLI maps these onto exit codes, so keep the split stable:
input/validation problems, computation problems, fit non-convergence.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ToolkitError):
    """Bad input: malformed data file, inconsistent quantum numbers, bad config."""


class DataFileError(ValidationError):
    """Species data file failed to parse or is missing mandatory entries."""


class ComputationError(ToolkitError):
    """A computation could not be carried out on valid input."""


class ResonanceGuardError(ComputationError):
    """Requested wavelength sits inside the guard band around a hyperfine line."""

    def __init__(self, wavelength_nm, line_label, detuning_hz, guard_hz):
        self.wavelength_nm = wavelength_nm
        self.line_label = line_label
        self.detuning_hz = detuning_hz
        self.guard_hz = guard_hz
        super().__init__(
            f"wavelength {wavelength_nm:.6f} nm is within the resonance guard of "
            f"{line_label} (|detuning| = {abs(detuning_hz):.3e} Hz < {guard_hz:.3e} Hz)"
        )


class BracketError(ComputationError):
    """Root bracket invalid: no sign change, or several roots inside."""


class FitNonConvergenceError(ToolkitError):
    """Iterative fit stopped without meeting its convergence tolerance."""


class UnidentifiableFitError(FitNonConvergenceError):
    """Data carry no information about the requested parameters."""
