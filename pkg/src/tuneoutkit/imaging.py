"""Absorption-image pipeline: synthesis, fringe removal, OD, peak fitting.

The chain mirrors a cold-atom imaging sequence.  A signal exposure S and a
reference exposure R share an illumination field whose interference fringes
drift between the two; the optical density -log(S/R) therefore carries
fringe residue unless the reference is rebuilt.  A library of atom-free
frames, diagonalized once over a signal-free mask, lets every shot assemble
the least-squares optimal reference with two matrix-vector products.

Populations of the diffraction orders come from vertically binned band
profiles fitted with per-order double Gaussians (condensed plus thermal
part) on a shared center grid.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ComputationError,
    DataFileError,
    FitNonConvergenceError,
    UnidentifiableFitError,
    ValidationError,
)
from .kd import MomentumPopulations

OD_CAP = 6.0

# thermal part must stay genuinely wider than the condensed peak,
# otherwise the two amplitudes trade off freely
THERMAL_WIDTH_MIN_RATIO = 2.5
THERMAL_WIDTH_INIT_RATIO = 3.0
THERMAL_WIDTH_MAX_RATIO = 12.0


@dataclass(frozen=True)
class Frame:
    """Single exposure in photoelectron counts."""

    data: np.ndarray
    shot_id: str = ""
    role: str = "signal"

    def __post_init__(self):
        arr = np.asarray(self.data)
        object.__setattr__(self, "data", arr)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError("frame data must be a nonempty 2-d array")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"frame {self.shot_id!r} contains non-finite counts")
        if arr.min() < 0:
            raise ValidationError(f"frame {self.shot_id!r} contains negative counts")
        if self.role not in ("signal", "reference"):
            raise ValidationError(f"frame role {self.role!r} not signal/reference")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ImageRegion:
    """Half-open rectangle [row0, row1) x [col0, col1)."""

    row0: int
    row1: int
    col0: int
    col1: int

    def __post_init__(self):
        if not (self.row0 < self.row1 and self.col0 < self.col1):
            raise ValidationError(f"empty region {self}")
        if min(self.row0, self.col0) < 0:
            raise ValidationError(f"negative region bound {self}")

    def check_inside(self, shape):
        if self.row1 > shape[0] or self.col1 > shape[1]:
            raise ValidationError(f"region {self} leaves the {shape} frame")

    @property
    def index(self):
        return (slice(self.row0, self.row1), slice(self.col0, self.col1))

    @property
    def n_pixels(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def overlaps(self, other: "ImageRegion") -> bool:
        return not (
            self.row1 <= other.row0
            or other.row1 <= self.row0
            or self.col1 <= other.col0
            or other.col1 <= self.col0
        )


# ---------------------------------------------------------------------------
# frame files: 16-bit portable graymap plus a plain-text sidecar

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_frame(path, frame: Frame) -> None:
    """Store counts as a big-endian 16-bit PGM with a .meta sidecar."""
    path = str(path)
    counts = np.round(frame.data)
    if counts.max() > 65535:
        raise ValidationError(
            f"frame {frame.shot_id!r} peaks at {counts.max():.0f} counts, "
            "beyond the 16-bit file range"
        )
    h, w = counts.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 65535\n".encode())
        fh.write(counts.astype(">u2").tobytes())
    with open(path + ".meta", "w") as fh:
        fh.write("format = tuneout-frame/1\n")
        fh.write(f"shot_id = {frame.shot_id}\n")
        fh.write(f"role = {frame.role}\n")


def read_frame(path) -> Frame:
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise DataFileError(f"{path}: not a P5 graymap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 65535:
        raise DataFileError(f"{path}: expected 16-bit graymap, maxval {maxval}")
    if len(blob) - m.end() < 2 * h * w:
        raise DataFileError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(blob, dtype=">u2", offset=m.end(), count=h * w)
    meta = {"shot_id": "", "role": "signal"}
    try:
        with open(path + ".meta") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        lines = []
    for line in lines:
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return Frame(
        data=pixels.reshape(h, w).astype(np.float64),
        shot_id=meta["shot_id"],
        role=meta["role"],
    )


# ---------------------------------------------------------------------------
# reference composition

@dataclass(frozen=True)
class ReferenceBasis:
    """Reference library with its masked decomposition precomputed.

    The costly part, diagonalizing the Gram matrix of the library
    restricted to the mask, happens once here; composing a reference for
    a shot is then two matrix-vector products and a diagonal solve.
    """

    mask: ImageRegion
    masked: np.ndarray        # K x P, float64, mask pixels per frame
    full: np.ndarray          # K x (H*W), float32; assembly only
    shape: tuple
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    version: str

    @property
    def n_frames(self) -> int:
        return self.masked.shape[0]


def build_reference_basis(
    frames, mask: ImageRegion, max_frames: int = 500, rank_tol: float = 1e-12
) -> ReferenceBasis:
    frames = list(frames)
    if not frames:
        raise ValidationError("reference basis needs at least one frame")
    if len(frames) > max_frames:
        raise ValidationError(f"{len(frames)} reference frames exceed the {max_frames} cap")
    shape = frames[0].shape
    for fr in frames:
        if fr.shape != shape:
            raise ValidationError(
                f"frame {fr.shot_id!r} is {fr.shape}, basis is {shape}"
            )
    mask.check_inside(shape)

    masked = np.empty((len(frames), mask.n_pixels), dtype=np.float64)
    full = np.empty((len(frames), shape[0] * shape[1]), dtype=np.float32)
    for k, fr in enumerate(frames):
        masked[k] = fr.data[mask.index].ravel()
        full[k] = fr.data.ravel()

    gram = masked @ masked.T
    evals, evecs = np.linalg.eigh(gram)
    cutoff = evals[-1] * rank_tol
    keep = evals > cutoff
    rank = int(np.count_nonzero(keep))
    if rank == 0:
        raise ComputationError("reference basis is numerically null on the mask")

    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(masked).tobytes())
    digest.update(repr(mask).encode())
    return ReferenceBasis(
        mask=mask,
        masked=masked,
        full=full,
        shape=shape,
        eigenvalues=evals[keep],
        eigenvectors=evecs[:, keep],
        rank=rank,
        version=digest.hexdigest()[:16],
    )


@dataclass(frozen=True)
class ComposedReference:
    frame: Frame
    coefficients: np.ndarray
    masked_residual_rms: float
    basis_version: str


def compose_reference(signal: Frame, basis: ReferenceBasis) -> ComposedReference:
    """Least-squares reference for one shot, built over the masked pixels."""
    if signal.shape != basis.shape:
        raise ValidationError(
            f"signal frame is {signal.shape}, basis is {basis.shape}"
        )
    target = signal.data[basis.mask.index].ravel()
    projections = basis.masked @ target                       # K
    rotated = basis.eigenvectors.T @ projections              # rank
    coeffs = basis.eigenvectors @ (rotated / basis.eigenvalues)
    best = (coeffs.astype(np.float32) @ basis.full).astype(np.float64)
    best = np.clip(best.reshape(basis.shape), 0.0, None)
    residual = target - basis.masked.T @ coeffs
    return ComposedReference(
        frame=Frame(best, shot_id=signal.shot_id, role="reference"),
        coefficients=coeffs,
        masked_residual_rms=float(np.sqrt(np.mean(residual**2))),
        basis_version=basis.version,
    )


# ---------------------------------------------------------------------------
# optical density

@dataclass(frozen=True)
class ODImage:
    data: np.ndarray
    valid: np.ndarray            # False where a pixel had to be clamped
    clamped_pixels: int
    reference_kind: str          # "raw" or "composed"


def optical_density(
    signal: Frame, reference: Frame, cap: float = OD_CAP, reference_kind: str = "raw"
) -> ODImage:
    """Pixelwise -log(S/R).

    Nonpositive pixels carry no ratio information and absorption deeper
    than the cap is indistinguishable from total extinction: both are set
    to the cap, counted, and flagged invalid so fits can skip them.
    """
    if signal.shape != reference.shape:
        raise ValidationError(
            f"signal {signal.shape} and reference {reference.shape} differ"
        )
    s = signal.data
    r = reference.data
    bad = (s <= 0.0) | (r <= 0.0)
    good = ~bad
    od = np.full(s.shape, cap, dtype=np.float64)
    od[good] = -np.log(s[good] / r[good])
    over = od > cap
    od[over] = cap
    invalid = bad | over
    return ODImage(
        data=od,
        valid=~invalid,
        clamped_pixels=int(np.count_nonzero(invalid)),
        reference_kind=reference_kind,
    )


def snr(image: np.ndarray, signal_region: ImageRegion, background_region: ImageRegion) -> float:
    """Background-subtracted signal mean over background standard deviation.

    Linear in the signal amplitude by construction; an exactly constant
    background yields infinity rather than a division error.
    """
    arr = np.asarray(image, dtype=float)
    signal_region.check_inside(arr.shape)
    background_region.check_inside(arr.shape)
    if signal_region.overlaps(background_region):
        raise ValidationError("signal and background regions overlap")
    sig = arr[signal_region.index]
    bg = arr[background_region.index]
    spread = float(np.std(bg))
    lift = float(np.mean(sig) - np.mean(bg))
    if spread == 0.0:
        return math.inf
    return lift / spread


# ---------------------------------------------------------------------------
# synthetic shots

@dataclass(frozen=True)
class FringeSpec:
    """Sum of sinusoidal illumination modes with shot-to-shot phase drift."""

    amplitudes: tuple = (0.10, 0.06)
    periods_px: tuple = (17.3, 41.7)
    angles: tuple = (0.12, 1.02)
    drift_sigma: float = 2.0      # rad, phase walk between S and R exposures

    def __post_init__(self):
        n = len(self.amplitudes)
        if len(self.periods_px) != n or len(self.angles) != n:
            raise ValidationError("fringe mode lists must share a length")
        if any(a < 0 for a in self.amplitudes) or sum(self.amplitudes) >= 1.0:
            raise ValidationError("fringe amplitudes must be >= 0 and sum below 1")

    def field(self, shape, phases) -> np.ndarray:
        rows = np.arange(shape[0])[:, None]
        cols = np.arange(shape[1])[None, :]
        out = np.ones(shape, dtype=np.float64)
        for amp, period, angle, phase in zip(
            self.amplitudes, self.periods_px, self.angles, phases
        ):
            wave = (cols * math.cos(angle) + rows * math.sin(angle)) * (
                2.0 * math.pi / period
            )
            out += amp * np.sin(wave + phase)
        return out


@dataclass(frozen=True)
class NoiseSpec:
    illumination_counts: float = 1800.0
    poisson: bool = True
    readout_sigma: float = 0.0

    def __post_init__(self):
        if self.illumination_counts <= 0:
            raise ValidationError("illumination level must be > 0")


@dataclass(frozen=True)
class BandTruth:
    """One Stern-Gerlach band: a row of diffraction orders for one m_F."""

    m_f: int
    populations: dict                 # order N -> fraction
    row_center: float
    center_col: float
    order_spacing_px: float
    vertical_sigma_px: float = 6.0
    bec_sigma_px: float = 3.0
    thermal_sigma_px: float = 11.0
    thermal_area_fraction: float = 0.25
    peak_od: float = 1.4              # condensed-peak OD at unit population

    def __post_init__(self):
        MomentumPopulations(self.populations)  # reuse its validation
        if self.thermal_sigma_px < THERMAL_WIDTH_MIN_RATIO * self.bec_sigma_px:
            raise ValidationError(
                "thermal width must clearly exceed the condensed width "
                f"({self.thermal_sigma_px} vs {self.bec_sigma_px} px)"
            )
        if not 0.0 <= self.thermal_area_fraction < 1.0:
            raise ValidationError("thermal area fraction must lie in [0, 1)")

    @property
    def n_max(self) -> int:
        return max(abs(n) for n in self.populations)


def _od_field(shape, bands) -> np.ndarray:
    rows = np.arange(shape[0], dtype=np.float64)[:, None]
    cols = np.arange(shape[1], dtype=np.float64)[None, :]
    od = np.zeros(shape, dtype=np.float64)
    for band in bands:
        vert = np.exp(
            -((rows - band.row_center) ** 2) / (2.0 * band.vertical_sigma_px**2)
        )
        horiz = np.zeros((1, shape[1]))
        amp_ratio = (
            band.thermal_area_fraction
            / (1.0 - band.thermal_area_fraction)
            * band.bec_sigma_px
            / band.thermal_sigma_px
        )
        for n, pop in band.populations.items():
            center = band.center_col + n * band.order_spacing_px
            d2 = (cols - center) ** 2
            peak = band.peak_od * pop
            horiz += peak * np.exp(-d2 / (2.0 * band.bec_sigma_px**2))
            horiz += peak * amp_ratio * np.exp(-d2 / (2.0 * band.thermal_sigma_px**2))
        od += vert * horiz
    return od


def _check_geometry(shape, bands):
    for band in bands:
        pad_r = 3.0 * band.vertical_sigma_px
        if band.row_center - pad_r < 0 or band.row_center + pad_r > shape[0]:
            raise ValidationError(
                f"band m_F={band.m_f} rows overflow the {shape} frame"
            )
        reach = band.n_max * band.order_spacing_px + 3.0 * band.thermal_sigma_px
        if band.center_col - reach < 0 or band.center_col + reach > shape[1]:
            raise ValidationError(
                f"band m_F={band.m_f} orders overflow the {shape} frame"
            )


@dataclass(frozen=True)
class ShotRecord:
    """Ground truth serialized next to every synthetic exposure pair."""

    shot_id: str
    bands: tuple
    fringe: FringeSpec
    noise: NoiseSpec
    signal_phases: tuple
    reference_phases: tuple


def _expose(ideal: np.ndarray, noise: NoiseSpec, rng) -> np.ndarray:
    counts = ideal
    if noise.poisson:
        counts = rng.poisson(counts).astype(np.float64)
    if noise.readout_sigma > 0:
        counts = counts + rng.normal(0.0, noise.readout_sigma, size=counts.shape)
    return np.clip(counts, 0.0, None)


def synthesize_shot(
    shape,
    bands,
    fringe: FringeSpec,
    noise: NoiseSpec,
    rng,
    shot_id: str = "shot",
):
    """Generate a matched signal/reference pair plus its truth record.

    The reference sees the same fringe modes with phases drifted by the
    specified random walk; with zero fringe amplitude and noise switched
    off, -log(S/R) reproduces the injected OD field exactly.
    """
    bands = tuple(bands)
    _check_geometry(shape, bands)
    phases_s = tuple(rng.uniform(0.0, 2.0 * math.pi, size=len(fringe.amplitudes)))
    phases_r = tuple(
        p + rng.normal(0.0, fringe.drift_sigma) for p in phases_s
    )
    light_s = noise.illumination_counts * fringe.field(shape, phases_s)
    light_r = noise.illumination_counts * fringe.field(shape, phases_r)
    od = _od_field(shape, bands)
    signal = Frame(_expose(light_s * np.exp(-od), noise, rng), shot_id, "signal")
    reference = Frame(_expose(light_r, noise, rng), shot_id, "reference")
    record = ShotRecord(
        shot_id=shot_id,
        bands=bands,
        fringe=fringe,
        noise=noise,
        signal_phases=phases_s,
        reference_phases=phases_r,
    )
    return signal, reference, record


def synthesize_reference(shape, fringe: FringeSpec, noise: NoiseSpec, rng, shot_id="ref") -> Frame:
    """Atom-free exposure with fresh fringe phases, for reference libraries."""
    phases = rng.uniform(0.0, 2.0 * math.pi, size=len(fringe.amplitudes))
    light = noise.illumination_counts * fringe.field(shape, phases)
    return Frame(_expose(light, noise, rng), shot_id, "reference")


# ---------------------------------------------------------------------------
# band profiles and peak fitting

@dataclass(frozen=True)
class BandLayout:
    """Where to look for one band's orders in the OD image."""

    m_f: int
    row0: int
    row1: int
    center_col: float
    order_spacing_px: float
    n_orders: int                 # fit orders N in [-n_orders, n_orders]

    def __post_init__(self):
        if self.row0 >= self.row1:
            raise ValidationError(f"band m_F={self.m_f} has empty rows")
        if self.n_orders < 0 or self.order_spacing_px <= 0:
            raise ValidationError(f"band m_F={self.m_f} layout is degenerate")


@dataclass(frozen=True)
class OrderPeak:
    order: int
    center_px: float
    bec_width_px: float
    bec_area: float
    thermal_width_px: float
    thermal_area: float


@dataclass(frozen=True)
class PeakFitResult:
    m_f: int
    peaks: tuple
    center_px: float
    spacing_px: float
    covariance: np.ndarray
    reduced_chi2: float
    profile_sigma: float
    excluded_pixels: int

    def peak(self, n: int) -> OrderPeak:
        for p in self.peaks:
            if p.order == n:
                return p
        raise KeyError(n)


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _band_model_jac(params, x, orders):
    c0, s = params[0], params[1]
    per = params[2:].reshape(len(orders), 4)  # a, t, w, r
    model = np.zeros_like(x)
    jac = np.zeros((x.size, params.size))
    d_c0 = np.zeros_like(x)
    d_s = np.zeros_like(x)
    for k, n in enumerate(orders):
        a, t, w, r = per[k]
        u = w * r
        d = x - (c0 + n * s)
        gb = np.exp(-(d * d) / (2.0 * w * w))
        gt = np.exp(-(d * d) / (2.0 * u * u))
        model += a * gb + t * gt
        chain = a * gb * d / (w * w) + t * gt * d / (u * u)
        d_c0 += chain
        d_s += chain * n
        base = 2 + 4 * k
        jac[:, base + 0] = gb
        jac[:, base + 1] = gt
        jac[:, base + 2] = a * gb * d * d / w**3 + t * gt * d * d / u**3 * r
        jac[:, base + 3] = t * gt * d * d / u**3 * w
    jac[:, 0] = d_c0
    jac[:, 1] = d_s
    return model, jac


def band_profile(od: ODImage, layout: BandLayout):
    """Vertically binned OD with clamped pixels zero-filled, plus their count."""
    if layout.row1 > od.data.shape[0]:
        raise ValidationError(f"band m_F={layout.m_f} rows leave the image")
    rows = slice(layout.row0, layout.row1)
    block = np.where(od.valid[rows], od.data[rows], 0.0)
    return block.sum(axis=0), int(np.count_nonzero(~od.valid[rows]))


def _profile_noise(profile, centers, spacing) -> float:
    x = np.arange(profile.size)
    near = np.zeros(profile.size, dtype=bool)
    for c in centers:
        near |= np.abs(x - c) < 0.45 * spacing
    quiet = profile[~near]
    if quiet.size < 8:
        quiet = profile
    # half the central 90% spread; robust against leftover peak tails
    lo, hi = np.percentile(quiet, [5.0, 95.0])
    return max(float(hi - lo) / (2.0 * 1.645), 1e-6)


def fit_band(
    od: ODImage,
    layout: BandLayout,
    max_nfev: int = 400,
) -> PeakFitResult:
    """Fit 2n+1 double-Gaussian orders on a shared, evenly spaced grid."""
    from scipy.optimize import least_squares

    profile, excluded = band_profile(od, layout)
    x = np.arange(profile.size, dtype=np.float64)
    orders = list(range(-layout.n_orders, layout.n_orders + 1))
    centers0 = [layout.center_col + n * layout.order_spacing_px for n in orders]
    if min(centers0) < 0 or max(centers0) >= profile.size:
        raise ValidationError(f"band m_F={layout.m_f} orders leave the image")
    sigma = _profile_noise(profile, centers0, layout.order_spacing_px)

    w0 = max(2.0, 0.08 * layout.order_spacing_px)
    floor = np.median(profile)
    p0 = [layout.center_col, layout.order_spacing_px]
    lo = [layout.center_col - 0.4 * layout.order_spacing_px, 0.7 * layout.order_spacing_px]
    hi = [layout.center_col + 0.4 * layout.order_spacing_px, 1.3 * layout.order_spacing_px]
    for n, c in zip(orders, centers0):
        i0 = max(0, int(c - w0 * 2))
        i1 = min(profile.size, int(c + w0 * 2) + 1)
        amp = max(float(profile[i0:i1].max() - floor), 1e-3)
        p0 += [0.7 * amp, 0.05 * amp, w0, THERMAL_WIDTH_INIT_RATIO]
        lo += [0.0, 0.0, 0.8, THERMAL_WIDTH_MIN_RATIO]
        hi += [np.inf, np.inf, 0.45 * layout.order_spacing_px, THERMAL_WIDTH_MAX_RATIO]

    def residuals(params):
        model, _ = _band_model_jac(params, x, orders)
        return (model - profile) / sigma

    def jacobian(params):
        _, jac = _band_model_jac(params, x, orders)
        return jac / sigma

    fit = least_squares(
        residuals,
        x0=np.array(p0),
        jac=jacobian,
        bounds=(np.array(lo), np.array(hi)),
        xtol=1e-10,
        ftol=1e-10,
        max_nfev=max_nfev,
    )
    if not fit.success:
        raise FitNonConvergenceError(
            f"band m_F={layout.m_f} peak fit failed: {fit.message}"
        )

    jtj = fit.jac.T @ fit.jac
    dof = max(1, x.size - fit.x.size)
    chi2 = float(np.sum(fit.fun**2))
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj)

    c0, spacing = float(fit.x[0]), float(fit.x[1])
    peaks = []
    for k, n in enumerate(orders):
        a, t, w, r = fit.x[2 + 4 * k : 6 + 4 * k]
        peaks.append(
            OrderPeak(
                order=n,
                center_px=c0 + n * spacing,
                bec_width_px=float(w),
                bec_area=float(a * w * _SQRT_2PI),
                thermal_width_px=float(w * r),
                thermal_area=float(t * w * r * _SQRT_2PI),
            )
        )
    return PeakFitResult(
        m_f=layout.m_f,
        peaks=tuple(peaks),
        center_px=c0,
        spacing_px=spacing,
        covariance=cov,
        reduced_chi2=chi2 / dof,
        profile_sigma=sigma,
        excluded_pixels=excluded,
    )


def band_model_profile(fit: PeakFitResult, cols):
    """Evaluate the fitted double-Gaussian comb on a column grid."""
    x = np.asarray(cols, dtype=np.float64)
    model = np.zeros_like(x)
    for pk in fit.peaks:
        d2 = (x - pk.center_px) ** 2
        a = pk.bec_area / (pk.bec_width_px * _SQRT_2PI)
        t = pk.thermal_area / (pk.thermal_width_px * _SQRT_2PI)
        model += a * np.exp(-d2 / (2.0 * pk.bec_width_px**2))
        model += t * np.exp(-d2 / (2.0 * pk.thermal_width_px**2))
    return model


def _population_uncertainties(fit: PeakFitResult, orders):
    """Delta-method sigmas for the normalized condensed areas.

    P_k = A_k / sum(A), A_j = amp_j * width_j * sqrt(2 pi), so dP_k/dA_j =
    (delta_kj - P_k) / sum(A); the area gradients land on the amplitude and
    width slots of the parameter vector.
    """
    k_count = len(orders)
    areas = np.array([fit.peak(n).bec_area for n in orders])
    total = areas.sum()
    if total <= 0:
        raise UnidentifiableFitError(
            f"band m_F={fit.m_f}: no condensed signal in any order"
        )
    grads = np.zeros((k_count, fit.covariance.shape[0]))
    for k in range(k_count):
        for j in range(k_count):
            width_j = fit.peaks[j].bec_width_px
            amp_j = areas[j] / max(width_j, 1e-12) / _SQRT_2PI
            coef = ((1.0 if j == k else 0.0) - areas[k] / total) / total
            grads[k, 2 + 4 * j] = coef * width_j * _SQRT_2PI
            grads[k, 4 + 4 * j] = coef * amp_j * _SQRT_2PI
    var = np.einsum("kp,pq,kq->k", grads, fit.covariance, grads)
    sigmas = np.sqrt(np.clip(var, 0.0, None))
    # An amplitude pinned at its zero bound has no curvature, so the
    # delta method reports ~0 there; a population can never be known
    # better than the area detection noise of a condensed peak of that
    # width, sigma_A = profile_sigma * sqrt(2 sqrt(pi) w).
    for k in range(k_count):
        w_k = fit.peaks[k].bec_width_px
        floor = fit.profile_sigma * math.sqrt(2.0 * math.sqrt(math.pi) * w_k) / total
        sigmas[k] = max(sigmas[k], floor)
    return sigmas


def extract_populations(od: ODImage, layouts):
    """Per-band order populations from the condensed-peak areas.

    Returns ``{m_f: (MomentumPopulations, PeakFitResult)}``; populations
    are normalized within each band, so they sum to one by construction.
    """
    out = {}
    for layout in layouts:
        fit = fit_band(od, layout)
        orders = [p.order for p in fit.peaks]
        areas = np.array([p.bec_area for p in fit.peaks])
        total = areas.sum()
        if total <= 0:
            raise UnidentifiableFitError(
                f"band m_F={layout.m_f}: no condensed signal in any order"
            )
        sigmas = _population_uncertainties(fit, orders)
        pops = MomentumPopulations(
            {n: float(a / total) for n, a in zip(orders, areas)},
            {n: float(s) for n, s in zip(orders, sigmas)},
        )
        out[layout.m_f] = (pops, fit)
    return out


# ---------------------------------------------------------------------------
# latency harness

def benchmark_compose(basis: ReferenceBasis, signals, repeats: int = 1):
    """Wall-clock times of the per-shot compose step, in seconds."""
    import time

    times = []
    for _ in range(repeats):
        for frame in signals:
            t0 = time.perf_counter()
            compose_reference(frame, basis)
            times.append(time.perf_counter() - t0)
    return np.array(times)
