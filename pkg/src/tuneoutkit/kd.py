"""Kapitza-Dirac diffraction: forward model and depth inversion.

A thin pulsed lattice imprints a phase grating on the cloud; in the
thin-grating (Raman-Nath) regime the population of the 2N hbar k momentum
order is P_N = J_N(phi)^2 with phase phi = V0 * tau_eff / (2 hbar).  The
phase is even in V0, so inversion recovers only |V0|; the sign must come
from theory.

Depths are handled in recoil units throughout.  Converting the phase needs
the recoil frequency in Hz, which callers obtain from
polarizability.recoil_energy_hz for their species and wavelength.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import jv

from .errors import ComputationError, UnidentifiableFitError, ValidationError

# Depth ceiling for the thin-grating analysis with the standard ~8.75 us
# effective pulse.  Above roughly a fifth of it the quadratic phase across
# the pulse starts to matter, hence the default warn fraction.
THIN_GRATING_MAX_DEPTH_E_R = 125.0
DEFAULT_WARN_FRACTION = 0.2

_TAIL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class MomentumPopulations:
    """Populations of the 2N hbar k orders, N in [-n_max, n_max]."""

    populations: dict
    uncertainties: dict = None

    def __post_init__(self):
        for n, p in self.populations.items():
            if not isinstance(n, int):
                raise ValidationError(f"momentum order {n!r} is not an integer")
            if not (p >= 0.0 and math.isfinite(p)):
                raise ValidationError(f"population of order {n} is {p}, must be >= 0")
        if self.uncertainties is not None:
            extra = set(self.uncertainties) - set(self.populations)
            if extra:
                raise ValidationError(f"uncertainty given for absent orders {sorted(extra)}")
        total = sum(self.populations.values())
        # noisy per-order extractions may overshoot 1 by their combined scatter
        slack = 1e-6
        if self.uncertainties:
            slack += 6.0 * math.sqrt(sum(s * s for s in self.uncertainties.values()))
        if total > 1.0 + slack:
            raise ValidationError(f"populations sum to {total:.6f} > 1")

    @property
    def n_max(self) -> int:
        return max(abs(n) for n in self.populations)

    def order(self, n: int) -> float:
        return self.populations[n]

    def total(self) -> float:
        return sum(self.populations.values())


def diffraction_populations(
    depth_e_r: float,
    tau_eff_us: float,
    recoil_hz: float,
    n_max: int = None,
) -> MomentumPopulations:
    """Forward model: P_N = J_N(phi)^2 at the given depth.

    With no explicit n_max the truncation grows until the neglected tail
    is below 1e-12 (sum rule: the orders sum to exactly 1).
    """
    if tau_eff_us <= 0:
        raise ValidationError(f"effective pulse duration {tau_eff_us} us must be > 0")
    if recoil_hz <= 0:
        raise ValidationError(f"recoil frequency {recoil_hz} Hz must be > 0")
    phi = pulse_phase(depth_e_r, tau_eff_us, recoil_hz)
    if n_max is None:
        # J_N(phi) decays superexponentially once N > |phi|
        n_max = max(2, int(math.ceil(abs(phi))) + 4)
        while True:
            tail = 1.0 - _population_sum(phi, n_max)
            if tail < _TAIL_TOLERANCE:
                break
            n_max += 2
    orders = np.arange(-n_max, n_max + 1)
    probs = jv(orders, phi) ** 2
    return MomentumPopulations({int(n): float(p) for n, p in zip(orders, probs)})


def pulse_phase(depth_e_r: float, tau_eff_us: float, recoil_hz: float) -> float:
    """Grating phase V0 tau / 2 hbar, depth given in recoil units."""
    return depth_e_r * math.pi * recoil_hz * tau_eff_us * 1e-6


def phase_to_depth(phi: float, tau_eff_us: float, recoil_hz: float) -> float:
    return phi / (math.pi * recoil_hz * tau_eff_us * 1e-6)


def _population_sum(phi: float, n_max: int) -> float:
    orders = np.arange(-n_max, n_max + 1)
    return float(np.sum(jv(orders, phi) ** 2))


@dataclass(frozen=True)
class ThinGratingVerdict:
    depth_e_r: float
    margin: float          # |V0| relative to the validity ceiling
    ok: bool
    tau_eff_us: float

    @property
    def verdict(self) -> str:
        return "pass" if self.ok else "warn"


def raman_nath_check(
    depth_e_r: float,
    tau_eff_us: float = 8.75,
    warn_fraction: float = DEFAULT_WARN_FRACTION,
) -> ThinGratingVerdict:
    """Report how far |V0| sits from the thin-grating ceiling.

    The ceiling is quoted for the standard effective pulse; tau_eff is
    carried along in the verdict so records stay self-describing.
    """
    margin = abs(depth_e_r) / THIN_GRATING_MAX_DEPTH_E_R
    return ThinGratingVerdict(
        depth_e_r=depth_e_r,
        margin=margin,
        ok=margin <= warn_fraction,
        tau_eff_us=tau_eff_us,
    )


@dataclass(frozen=True)
class PulseProfile:
    """Sampled lattice intensity envelope, normalized to its maximum."""

    nominal_duration_us: float
    times_us: np.ndarray
    envelope: np.ndarray
    intensity_rms: float = 0.0   # relative rms of shot-to-shot intensity

    def __post_init__(self):
        t = np.asarray(self.times_us, dtype=float)
        env = np.asarray(self.envelope, dtype=float)
        object.__setattr__(self, "times_us", t)
        object.__setattr__(self, "envelope", env)
        if self.nominal_duration_us <= 0:
            raise ValidationError("pulse duration must be > 0")
        if t.ndim != 1 or env.shape != t.shape:
            raise ValidationError("envelope and time stamps must be matching 1-d arrays")
        if t.size == 0:
            raise ValidationError("empty pulse envelope")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("time stamps must increase strictly")
        if not np.all(np.isfinite(env)):
            raise ValidationError("envelope contains non-finite samples")
        if env.min() < -1e-9 or env.max() > 1.0 + 1e-9:
            raise ValidationError(
                f"envelope range [{env.min():.3g}, {env.max():.3g}] outside [0, 1]; "
                "normalize to the maximum intensity first"
            )


def effective_pulse_duration(profile: PulseProfile, min_samples: int = 100) -> float:
    """Integral of I(t)/I_max over the pulse, in us."""
    if profile.times_us.size < min_samples:
        raise ValidationError(
            f"envelope has {profile.times_us.size} samples, need >= {min_samples}"
        )
    return float(np.trapezoid(profile.envelope, profile.times_us))


def exponential_edge_envelope(
    duration_us: float = 12.0,
    edge_us: float = 1.7,
    samples: int = 1201,
    intensity_rms: float = 0.0,
) -> PulseProfile:
    """Gate of the given length with exponential rise and fall edges.

    The switch-on approach and the mirrored switch-off meet mid-pulse, the
    shape a square RF gate produces through a finite-bandwidth modulator.
    """
    if edge_us <= 0:
        raise ValidationError("edge time must be > 0")
    t = np.linspace(0.0, duration_us, samples)
    rise = 1.0 - np.exp(-t / edge_us)
    fall = 1.0 - np.exp(-(duration_us - t) / edge_us)
    return PulseProfile(
        nominal_duration_us=duration_us,
        times_us=t,
        envelope=np.minimum(rise, fall),
        intensity_rms=intensity_rms,
    )


@dataclass(frozen=True)
class DepthEstimate:
    depth_e_r: float         # |V0|; the grating phase cannot see the sign
    sigma_e_r: float
    phase: float
    tau_eff_us: float
    orders_used: tuple
    reduced_chi2: float
    n_iterations: int


def _phase_residuals(phi, orders, probs, weights):
    model = jv(orders, phi) ** 2
    return (model - probs) * np.sqrt(weights)


def invert_depth(
    populations: MomentumPopulations,
    tau_eff_us: float,
    recoil_hz: float,
    atom_number: float = None,
    noise_floor: float = 1e-4,
    detection_threshold: float = 0.0,
    intensity_rms: float = 0.0,
) -> DepthEstimate:
    """Weighted least-squares inversion of the order populations to |V0|.

    Weights follow counting statistics when atom_number is given
    (var ~ P(1-P)/n plus a detection floor), or the caller's per-order
    uncertainties when the populations carry them.  Orders below
    detection_threshold are dropped, never treated as exact zeros.
    intensity_rms adds the shot-to-shot lattice intensity scatter to the
    reported sigma, since the depth tracks intensity linearly.
    """
    pops = populations.populations
    for needed in (0, 1, -1):
        if needed not in pops:
            raise ValidationError(f"inversion needs orders 0 and +-1, missing N={needed}")
    if tau_eff_us <= 0 or recoil_hz <= 0:
        raise ValidationError("tau_eff and recoil frequency must be > 0")

    kept = {n: p for n, p in pops.items() if n == 0 or p >= detection_threshold}
    orders = np.array(sorted(kept), dtype=float)
    probs = np.array([kept[int(n)] for n in orders])

    if populations.uncertainties:
        sig = np.array(
            [populations.uncertainties.get(int(n), noise_floor) for n in orders]
        )
        var = np.maximum(sig, noise_floor) ** 2
    elif atom_number:
        var = probs * np.clip(1.0 - probs, 0.0, 1.0) / atom_number + noise_floor**2
    else:
        var = np.full_like(probs, noise_floor**2)
    weights = 1.0 / var

    spread = float(np.ptp(probs))
    scale = float(np.max(np.sqrt(var)))
    if spread < 3.0 * scale and spread < 1e-3:
        raise UnidentifiableFitError(
            f"populations are flat (spread {spread:.2e} vs noise {scale:.2e}); "
            "the depth is not identifiable from them"
        )

    # Small-phase start from the first-order ratio, J1^2/J0^2 ~ (phi/2)^2,
    # refined on a coarse grid before polishing: the Bessel landscape has
    # local minima past the first J0 zero.
    p0, p1 = pops[0], 0.5 * (pops[1] + pops[-1])
    if p0 > 0:
        phi0 = 2.0 * math.sqrt(p1 / p0) if p1 < p0 else 1.5
    else:
        phi0 = 2.4
    grid = np.unique(np.concatenate([[phi0], np.linspace(0.0, 12.0, 241)]))
    costs = [
        float(np.sum(_phase_residuals(g, orders, probs, weights) ** 2)) for g in grid
    ]
    phi_start = float(grid[int(np.argmin(costs))])

    from scipy.optimize import least_squares

    fit = least_squares(
        _phase_residuals,
        x0=max(phi_start, 1e-6),
        args=(orders, probs, weights),
        bounds=(0.0, np.inf),
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
    )
    if not fit.success:
        raise ComputationError(f"depth inversion did not converge: {fit.message}")
    phi = float(fit.x[0])

    jac = jv(orders, phi) * (jv(orders - 1, phi) - jv(orders + 1, phi))
    curv = float(np.sum(weights * jac**2))
    if curv <= 0:
        raise UnidentifiableFitError("zero sensitivity of populations to the depth")
    dof = max(1, len(orders) - 1)
    chi2 = float(np.sum(fit.fun**2))
    sigma_phi = math.sqrt(1.0 / curv)

    depth = phase_to_depth(phi, tau_eff_us, recoil_hz)
    sigma = phase_to_depth(sigma_phi, tau_eff_us, recoil_hz)
    if intensity_rms:
        sigma = math.hypot(sigma, intensity_rms * depth)
    return DepthEstimate(
        depth_e_r=depth,
        sigma_e_r=sigma,
        phase=phi,
        tau_eff_us=tau_eff_us,
        orders_used=tuple(int(n) for n in orders),
        reduced_chi2=chi2 / dof,
        n_iterations=int(fit.nfev),
    )
