"""Physics fit models for depth scans.

Diffraction inversion yields |V0|, never the sign, so every model here is
a folded one.  Fitting |measured| against |model| biases the minimum
region; instead the models evaluate the exact expectation of the folded
Gaussian, E|N(mu, s^2)|, which stays smooth through zero and keeps the
estimators calibrated.

Three scan types share one weighted least-squares contract:
  - depth vs wavelength near the tune-out (line through zero),
  - depth vs wavelength for m_F = +-1 with a fluctuating polarization,
  - depth vs applied magnetic offset at the tune-out wavelength.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    ComputationError,
    FitNonConvergenceError,
    UnidentifiableFitError,
    ValidationError,
)
from .polarizability import LightField, polarizability_set, recoil_energy_hz

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_SQRT2 = math.sqrt(2.0)


def expected_abs_normal(mu, sigma):
    """E|X| for X ~ Normal(mu, sigma^2), elementwise.

    Closed form sqrt(2/pi) s exp(-mu^2/2s^2) + mu erf(mu/sqrt(2) s); the
    sigma -> 0 limit is |mu| exactly.
    """
    mu_b, sig_b = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    )
    if np.any(sig_b < 0):
        raise ValidationError("spread must be >= 0")
    scalar = mu_b.ndim == 0
    mu_b = np.atleast_1d(mu_b)
    sig_b = np.atleast_1d(sig_b)
    out = np.abs(mu_b).astype(float)
    live = sig_b > 0
    if live.any():
        m = mu_b[live]
        s = sig_b[live]
        out[live] = _SQRT_2_OVER_PI * s * np.exp(-(m * m) / (2.0 * s * s)) + m * erf(
            m / (_SQRT2 * s)
        )
    return float(out[0]) if scalar else out


def fluctuating_pol_potential(gamma, sigma_a):
    """Expected |potential| when the polarization degree fluctuates.

    gamma is the mean potential (any fixed units) and sigma_a the rms of
    the polarization degree; the effective spread on gamma is 2 sigma_a
    times the vector coefficient absorbed into gamma's units.  Exact
    limits: sigma_a = 0 gives |gamma|, gamma = 0 gives sqrt(8/pi) sigma_a.
    """
    return expected_abs_normal(gamma, 2.0 * np.asarray(sigma_a, dtype=float))


# ---------------------------------------------------------------------------
# generic weighted least squares

@dataclass(frozen=True)
class FitResult:
    params: np.ndarray
    sigma: np.ndarray
    covariance: np.ndarray
    chi2: float
    dof: int
    n_evaluations: int
    log: str
    at_lower: np.ndarray
    at_upper: np.ndarray

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / max(self.dof, 1)


def _feasible_jacobian(residual, x, lo, hi, rel_step):
    """Forward-difference Jacobian stepping only into the bound box."""
    f0 = np.asarray(residual(x), dtype=float)
    cols = []
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        if x[i] + h > hi[i]:
            h = -h
        if x[i] + h < lo[i]:
            h = lo[i] - x[i]
        if h == 0.0:
            # pinched box, nothing to vary; leave the singular check to it
            cols.append(np.zeros_like(f0))
            continue
        xs = x.copy()
        xs[i] += h
        cols.append((np.asarray(residual(xs), dtype=float) - f0) / h)
    return np.column_stack(cols)


def wls_fit(
    residual,
    x0,
    bounds=None,
    max_iterations: int = 200,
    x_rtol: float = 1e-10,
    diff_rel_step: float = 1e-6,
    jac=None,
) -> FitResult:
    """Weighted nonlinear least squares with covariance from the Jacobian.

    `residual` maps parameters to sigma-weighted residuals.  Numeric
    Jacobians use a relative step of 1e-6 unless an analytic one is
    supplied.  Convergence failure and a singular normal matrix raise
    instead of returning silently wrong uncertainties.
    """
    from scipy.optimize import least_squares

    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    r0 = np.asarray(residual(x0), dtype=float)
    if not np.all(np.isfinite(r0)):
        raise ValidationError("residuals are not finite at the initial guess")
    if bounds is None:
        lo = np.full(x0.size, -np.inf)
        hi = np.full(x0.size, np.inf)
    else:
        lo = np.asarray(bounds[0], dtype=float)
        hi = np.asarray(bounds[1], dtype=float)

    fit = least_squares(
        residual,
        x0=np.clip(x0, lo, hi),
        jac=jac if jac is not None else "2-point",
        diff_step=None if jac is not None else diff_rel_step,
        bounds=(lo, hi),
        method="trf",
        xtol=x_rtol,
        ftol=1e-12,
        gtol=1e-12,
        max_nfev=max_iterations * (x0.size + 1),
    )
    if not fit.success:
        raise FitNonConvergenceError(
            f"least squares stopped without convergence: {fit.message} "
            f"({fit.nfev} evaluations)"
        )
    # the trf solver hands back a bound-scaled Jacobian when a parameter
    # sits on a box edge, so rebuild the raw one at the solution
    if jac is not None:
        jmat = np.asarray(jac(fit.x), dtype=float)
    else:
        jmat = _feasible_jacobian(residual, fit.x, lo, hi, diff_rel_step)
    scale = np.maximum(np.abs(fit.x), 1.0)
    at_lower = np.isfinite(lo) & (fit.x - lo < 1e-8 * scale)
    at_upper = np.isfinite(hi) & (hi - fit.x < 1e-8 * scale)
    # a parameter pinned on a bound can sit where the residual is locally
    # flat (folded models do this at zero width); report NaN for it rather
    # than poisoning the whole covariance
    col_norm = np.linalg.norm(jmat, axis=0)
    flat = col_norm <= 1e-12 * max(float(col_norm.max(initial=0.0)), 1.0)
    if np.any(flat & ~(at_lower | at_upper)):
        raise UnidentifiableFitError(
            "singular normal matrix: some parameter combination is "
            "unconstrained by the data"
        )
    free = ~(flat & (at_lower | at_upper))
    cov = np.full((x0.size, x0.size), np.nan)
    sigma = np.full(x0.size, np.nan)
    if free.any():
        jtj = jmat[:, free].T @ jmat[:, free]
        try:
            cov_free = np.linalg.inv(jtj)
        except np.linalg.LinAlgError:
            raise UnidentifiableFitError(
                "singular normal matrix: some parameter combination is "
                "unconstrained by the data"
            ) from None
        cond = np.linalg.cond(jtj)
        if cond > 1e14:
            raise UnidentifiableFitError(
                f"normal matrix condition number {cond:.2e}; parameters are "
                "practically degenerate"
            )
        cov[np.ix_(free, free)] = cov_free
        sigma[free] = np.sqrt(np.diag(cov_free))
    chi2 = float(2.0 * fit.cost)
    dof = fit.fun.size - x0.size
    return FitResult(
        params=fit.x,
        sigma=sigma,
        covariance=cov,
        chi2=chi2,
        dof=dof,
        n_evaluations=int(fit.nfev),
        log=f"status {fit.status}: {fit.message}; {fit.nfev} evaluations, "
        f"cost {fit.cost:.6e}",
        at_lower=at_lower,
        at_upper=at_upper,
    )


# ---------------------------------------------------------------------------
# scan data

@dataclass(frozen=True)
class ScanPoint:
    """One measured |V0| against one control setting."""

    control: float           # wavelength in nm, or field offset in G
    depth_e_r: float
    sigma_e_r: float
    m_f: int = 0
    shots: int = 1

    def __post_init__(self):
        if not self.sigma_e_r > 0:
            raise ValidationError(
                f"scan point at {self.control} needs a positive uncertainty"
            )
        if self.depth_e_r < 0:
            raise ValidationError("measured |V0| cannot be negative")


def _split(points):
    pts = list(points)
    if not pts:
        raise ValidationError("empty scan")
    c = np.array([p.control for p in pts])
    y = np.array([p.depth_e_r for p in pts])
    s = np.array([p.sigma_e_r for p in pts])
    m = np.array([p.m_f for p in pts])
    return c, y, s, m


# ---------------------------------------------------------------------------
# tune-out extraction from a wavelength scan

@dataclass(frozen=True)
class TuneoutScanFit:
    lambda_m_nm: float
    lambda_m_sigma_nm: float
    slope_e_r_per_pm: float
    slope_sigma: float
    fit: FitResult


def fit_tuneout_scan(
    points,
    wavelength_sigma_nm: float = 0.0,
    slope_guess: float = None,
) -> TuneoutScanFit:
    """Zero crossing and slope of |V0|(lambda) around the tune-out.

    The model is the folded expectation of a line through zero, so points
    straddling the minimum carry information instead of bias.  A nonzero
    wavelength_sigma_nm is the meter's calibration allowance; it enters
    the reported lambda_M uncertainty in quadrature, mirroring how scan
    uncertainties are quoted in practice.
    """
    lam, y, sig, _ = _split(points)
    if lam.size < 3:
        raise ValidationError("tune-out scan needs at least 3 points")
    span = float(np.ptp(lam))
    if span <= 0:
        raise ValidationError("tune-out scan has zero wavelength span")

    # the folded model is even in the slope, so its sign is a convention;
    # fit the positive branch and leave the physical sign to theory
    lam0 = float(lam[np.argmin(y)])
    if slope_guess is None:
        slope_guess = float((y.max() - y.min()) / (span * 1e3))
        if slope_guess == 0.0:
            slope_guess = 1.0

    def residuals(p):
        lambda_m, slope = p
        mu = slope * (lam - lambda_m) * 1e3
        return (expected_abs_normal(mu, sig) - y) / sig

    fit = wls_fit(
        residuals,
        [lam0, abs(slope_guess)],
        bounds=([lam.min() - span, 0.0], [lam.max() + span, np.inf]),
    )
    lambda_m, slope = fit.params
    sl_sigma = float(fit.sigma[1])
    lam_sigma = float(fit.sigma[0])
    if fit.reduced_chi2 > 1.0:
        lam_sigma *= math.sqrt(fit.reduced_chi2)
        sl_sigma *= math.sqrt(fit.reduced_chi2)
    lam_sigma = math.hypot(lam_sigma, wavelength_sigma_nm)
    return TuneoutScanFit(
        lambda_m_nm=float(lambda_m),
        lambda_m_sigma_nm=lam_sigma,
        slope_e_r_per_pm=float(slope),
        slope_sigma=sl_sigma,
        fit=fit,
    )


# ---------------------------------------------------------------------------
# joint m_F = +-1 polarization fit

VECTOR_CONVENTIONS = ("full", "half")


def vector_depth_unit(light: LightField, species, f: int) -> float:
    """Lattice depth (E_r, signed) of the vector term per unit C * m_F/(2F).

    Uses the same conversion chain as the depth calculator: antinode field
    of the retro pair, polarizability in atomic units, depth in recoils.
    Convention factors for the fit live in _branch_weight.
    """
    from .atomic_data import HyperfineState
    from .constants import CODATA2018 as K

    pol = polarizability_set(HyperfineState(f, 0), light.wavelength_nm, species)
    peak_e0_sq = 4.0 * light.e0_squared
    e_r_joule = K.h * recoil_energy_hz(light.wavelength_nm, species.mass.value)
    return -(peak_e0_sq / 4.0) * pol.vector * K.au_polarizability / e_r_joule


def _branch_weight(m_f: int, f: int, convention: str) -> float:
    if convention == "full":
        return m_f / f
    if convention == "half":
        return m_f / (2.0 * f)
    raise ValidationError(f"unknown vector convention {convention!r}")


@dataclass(frozen=True)
class PolarizationFit:
    a0: float
    a0_sigma: float
    spread_a: float
    spread_a_sigma: float
    slope_e_r_per_pm: float
    slope_sigma: float
    lambda_m_nm: float
    lambda_m_held: bool
    convention: str
    spread_at_zero: bool
    fit: FitResult

    def __post_init__(self):
        if abs(self.a0) > 1.0:
            raise ValidationError(f"|A0| = {abs(self.a0):.3f} exceeds 1")
        if self.spread_a < 0:
            raise ValidationError("polarization spread cannot be negative")


def polarization_branch_depth(
    lam_nm, m_f, lambda_m_nm, slope_e_r_per_pm, a0, spread_a,
    vector_unit_e_r, f: int = 1, convention: str = "full",
    measurement_sigma=0.0,
):
    """Expected |V0| for one branch of the fluctuating-polarization model."""
    w = _branch_weight(m_f, f, convention)
    mu = slope_e_r_per_pm * (np.asarray(lam_nm, dtype=float) - lambda_m_nm) * 1e3
    mu = mu + a0 * w * vector_unit_e_r
    total_spread = np.hypot(
        spread_a * abs(w) * abs(vector_unit_e_r),
        np.asarray(measurement_sigma, dtype=float),
    )
    return expected_abs_normal(mu, total_spread)


def fit_polarization(
    points,
    lambda_m_nm: float,
    light: LightField,
    species,
    f: int = 1,
    convention: str = "full",
) -> PolarizationFit:
    """One joint fit to both m_F = +-1 branches.

    lambda_M is held at the value measured in the m_F = 0 state; free
    parameters are the common slope, the mean polarization degree A0, and
    its rms spread.  Which projection weight multiplies A0 (m_F/F or
    m_F/2F) is a notation choice with a factor-two consequence; both are
    supported and the choice is recorded in the result.
    """
    lam, y, sig, m = _split(points)
    branches = set(int(v) for v in m)
    if branches != {1, -1}:
        raise ValidationError(
            f"joint polarization fit needs exactly the m_F = +1 and -1 branches, got {sorted(branches)}"
        )
    unit = vector_depth_unit(
        LightField(
            wavelength_nm=lambda_m_nm,
            intensity_w_m2=light.intensity_w_m2,
            pol_angle=light.pol_angle,
            k_angle=light.k_angle,
            pol_axis_angle=light.pol_axis_angle,
        ),
        species,
        f,
    )
    if unit == 0.0:
        raise ComputationError("vector term vanishes; polarization is unidentifiable")

    # only the polarization spread is folded; detection noise on a
    # shot-averaged point is symmetric and belongs in the weights alone
    def residuals(p):
        slope, a0, spread = p
        model = np.empty_like(y)
        for branch in branches:
            sel = m == branch
            model[sel] = polarization_branch_depth(
                lam[sel], branch, lambda_m_nm, slope, a0, spread,
                unit, f, convention,
            )
        return (model - y) / sig

    # the joint model is even under (slope, A0) -> (-slope, -A0); pin the
    # slope positive so the fitted A0 sign is meaningful
    rough = (y.max() - y.min()) / max(np.ptp(lam) * 1e3, 1e-9)
    start = [abs(rough), 0.0, 1e-3]
    try:
        fit = wls_fit(
            residuals,
            start,
            bounds=([0.0, -1.0, 0.0], [np.inf, 1.0, 1.0]),
        )
    except UnidentifiableFitError:
        # below some width the folded model stops moving at all, so data
        # consistent with zero spread strands the optimizer on a flat
        # basin; refit with the width clamped and report that outcome
        fit = wls_fit(
            lambda p: residuals([p[0], p[1], 0.0]),
            start[:2],
            bounds=([0.0, -1.0], [np.inf, 1.0]),
        )
        slope, a0 = fit.params
        return PolarizationFit(
            a0=float(a0),
            a0_sigma=float(fit.sigma[1]),
            spread_a=0.0,
            spread_a_sigma=math.nan,
            slope_e_r_per_pm=float(slope),
            slope_sigma=float(fit.sigma[0]),
            lambda_m_nm=lambda_m_nm,
            lambda_m_held=True,
            convention=convention,
            spread_at_zero=True,
            fit=fit,
        )
    slope, a0, spread = fit.params
    return PolarizationFit(
        a0=float(a0),
        a0_sigma=float(fit.sigma[1]),
        spread_a=float(spread),
        spread_a_sigma=float(fit.sigma[2]),
        lambda_m_nm=lambda_m_nm,
        slope_e_r_per_pm=float(slope),
        slope_sigma=float(fit.sigma[0]),
        lambda_m_held=True,
        convention=convention,
        spread_at_zero=bool(fit.at_lower[2] or not np.isfinite(fit.sigma[2])),
        fit=fit,
    )


# ---------------------------------------------------------------------------
# magnetic environment

@dataclass(frozen=True)
class MagneticEnvironment:
    applied_g: tuple
    background_g: tuple

    def __post_init__(self):
        for name, vec in (("applied", self.applied_g), ("background", self.background_g)):
            if len(vec) != 3 or not all(math.isfinite(v) for v in vec):
                raise ValidationError(f"{name} field must be a finite 3-vector")

    @property
    def total_g(self) -> tuple:
        return tuple(a + b for a, b in zip(self.applied_g, self.background_g))


def cos_theta_k(env: MagneticEnvironment) -> float:
    """Projection of the quantization axis on the lattice axis (along z)."""
    bx, by, bz = env.total_g
    norm = math.sqrt(bx * bx + by * by + bz * bz)
    if norm == 0.0:
        raise ComputationError(
            "total magnetic field is zero; the quantization axis is undefined"
        )
    return bz / norm


def bfield_scan_depth(applied_values, axis: int, background_g, amp_e_r, measurement_sigma=0.0):
    """Expected |V0| along one scan axis at the m_F = 0 tune-out.

    The scalar part vanishes there and the small tensor offset between
    m_F sublevels is neglected, so the depth traces amp * |cos theta_k|
    as the applied field steers the total field direction.
    """
    vals = np.asarray(applied_values, dtype=float)
    mu = np.empty_like(vals)
    for i, v in enumerate(vals):
        applied = [0.0, 0.0, 0.0]
        applied[axis] = v
        mu[i] = amp_e_r * cos_theta_k(
            MagneticEnvironment(tuple(applied), tuple(background_g))
        )
    return expected_abs_normal(mu, np.broadcast_to(measurement_sigma, mu.shape))


@dataclass(frozen=True)
class BackgroundFieldFit:
    background_g: tuple          # (B0x, |B0y|, B0z); the y sign is unresolved
    sigma_g: tuple
    amp_e_r: float
    amp_sigma: float
    rho_xy_from_z: float         # transverse magnitude seen by the z scan
    rho_xy_sigma: float
    z_fit: FitResult
    x_fit: FitResult
    y_scan_reduced_chi2: float = math.nan


def fit_background_field(
    z_scan,
    x_scan,
    y_scan=None,
) -> BackgroundFieldFit:
    """Background field from sequential z- then x-axis scans.

    The z scan pins B0z (the depth minimum sits at the compensating
    offset) and the transverse magnitude; the x scan then splits it into
    B0x and |B0y| with B0z held.  A y scan, when given, is only compared
    against the already-fitted model, never fitted.
    """
    cz, yz, sz, _ = _split(z_scan)
    cx, yx, sx, _ = _split(x_scan)
    if cz.size < 4 or cx.size < 4:
        raise ValidationError("each field scan needs at least 4 points")

    # --- z scan: |V0| = amp |B0z + Bz| / sqrt(rho^2 + (B0z + Bz)^2)
    # fitted in rho^2 so the gradient stays finite as the transverse part
    # goes to zero; in rho itself the cost is quartic-flat there and the
    # solver creeps forever instead of reaching the boundary
    def _z_mu(p):
        amp, b0z, q = p
        axial = b0z + cz
        denom = np.maximum(np.sqrt(q + axial**2), 1e-300)
        return amp * axial / denom, axial, denom

    def z_resid(p):
        mu, _, _ = _z_mu(p)
        return (expected_abs_normal(mu, sz) - yz) / sz

    def z_jac(p):
        # dE|N(mu,s)|/dmu = erf(mu / sqrt(2) s); exact gradients keep the
        # solver off the finite-difference noise floor near the minimum
        amp, b0z, q = p
        mu, axial, denom = _z_mu(p)
        gain = erf(mu / (_SQRT2 * sz)) / sz
        return np.column_stack(
            [
                gain * axial / denom,
                gain * amp * q / denom**3,
                gain * (-0.5) * amp * axial / denom**3,
            ]
        )

    amp0 = float(yz.max())
    b0z0 = float(-cz[np.argmin(yz)])
    span = max(float(np.ptp(cz)), 1.0)
    zfit = wls_fit(
        z_resid,
        [max(amp0, 1e-6), b0z0, 0.09],
        bounds=([0.0, b0z0 - span, 0.0], [np.inf, b0z0 + span, 1e4]),
        jac=z_jac,
    )
    amp_z, b0z, q = zfit.params
    q_sigma = float(zfit.sigma[2])
    # Wald test in rho^2, the parameter that stays regular at the
    # boundary: anything within one sigma of zero cannot seed the x split
    if zfit.at_lower[2] or not math.isfinite(q_sigma) or q <= q_sigma:
        raise UnidentifiableFitError(
            "z scan is consistent with zero transverse field; B0x, B0y "
            "cannot be separated"
        )
    rho = math.sqrt(q)
    rho_sigma = q_sigma / (2.0 * rho)

    # --- x scan: |V0| = amp |B0z| / sqrt((B0x + Bx)^2 + B0y^2 + B0z^2)
    def _x_mu(p):
        amp, b0x, b0y = p
        denom = np.sqrt((b0x + cx) ** 2 + b0y**2 + b0z**2)
        return amp * b0z / denom, denom

    def x_resid(p):
        mu, _ = _x_mu(p)
        return (expected_abs_normal(mu, sx) - yx) / sx

    def x_jac(p):
        amp, b0x, b0y = p
        mu, denom = _x_mu(p)
        gain = erf(mu / (_SQRT2 * sx)) / sx
        return np.column_stack(
            [
                gain * b0z / denom,
                gain * (-amp) * b0z * (b0x + cx) / denom**3,
                gain * (-amp) * b0z * b0y / denom**3,
            ]
        )

    b0x0 = float(-cx[np.argmax(yx)])
    xfit = wls_fit(
        x_resid,
        [amp_z, b0x0, max(rho / 2.0, 1e-3)],
        bounds=([0.0, b0x0 - span, 0.0], [np.inf, b0x0 + span, 100.0]),
        jac=x_jac,
    )
    amp_x, b0x, b0y = xfit.params

    y_chi2 = math.nan
    if y_scan is not None:
        cy, yy, sy, _ = _split(y_scan)
        model = bfield_scan_depth(
            cy, 1, (b0x, b0y, b0z), amp_x, measurement_sigma=sy
        )
        y_chi2 = float(np.sum(((model - yy) / sy) ** 2) / max(cy.size, 1))

    return BackgroundFieldFit(
        background_g=(float(b0x), float(abs(b0y)), float(b0z)),
        sigma_g=(float(xfit.sigma[1]), float(xfit.sigma[2]), float(zfit.sigma[1])),
        amp_e_r=float(amp_x),
        amp_sigma=float(xfit.sigma[0]),
        rho_xy_from_z=float(rho),
        rho_xy_sigma=float(rho_sigma),
        z_fit=zfit,
        x_fit=xfit,
        y_scan_reduced_chi2=y_chi2,
    )
