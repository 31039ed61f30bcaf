"""Imaging chain: frame files, reference composition, OD, band fits."""

import math

import numpy as np
import pytest

from tuneoutkit.errors import DataFileError, ValidationError
from tuneoutkit.imaging import (
    BandLayout,
    BandTruth,
    Frame,
    FringeSpec,
    ImageRegion,
    NoiseSpec,
    band_model_profile,
    band_profile,
    benchmark_compose,
    build_reference_basis,
    compose_reference,
    extract_populations,
    fit_band,
    optical_density,
    read_frame,
    snr,
    synthesize_reference,
    synthesize_shot,
    write_frame,
)
from tuneoutkit.kd import diffraction_populations

RECOIL_HZ = 3678.212644338957
TAU_EFF_US = 8.699685824577307

SHAPE = (60, 200)
MASK = ImageRegion(0, 11, 0, 200)
QUIET = FringeSpec(amplitudes=(), periods_px=(), angles=())
CLEAN = NoiseSpec(illumination_counts=1200.0, poisson=False)


def _band(depth_e_r, m_f=0, row_center=30.0, n_orders=2):
    full = diffraction_populations(depth_e_r, TAU_EFF_US, RECOIL_HZ).populations
    pops = {n: p for n, p in full.items() if abs(n) <= n_orders}
    return BandTruth(
        m_f=m_f,
        populations=pops,
        row_center=row_center,
        center_col=100.0,
        order_spacing_px=30.0,
        vertical_sigma_px=4.0,
        bec_sigma_px=3.0,
        thermal_sigma_px=9.0,
    )


def _layout(band):
    pad = int(3.0 * band.vertical_sigma_px)
    return BandLayout(
        m_f=band.m_f,
        row0=int(band.row_center) - pad,
        row1=int(band.row_center) + pad,
        center_col=band.center_col,
        order_spacing_px=band.order_spacing_px,
        n_orders=band.n_max,
    )


# ---------------------------------------------------------------------------
# frames and regions

def test_frame_validation():
    with pytest.raises(ValidationError):
        Frame(np.array([1.0, 2.0]))                      # 1-d
    with pytest.raises(ValidationError):
        Frame(np.array([[1.0, -2.0]]))
    with pytest.raises(ValidationError):
        Frame(np.array([[1.0, np.nan]]))
    with pytest.raises(ValidationError):
        Frame(np.ones((2, 2)), role="dark")


def test_region_validation_and_overlap():
    with pytest.raises(ValidationError):
        ImageRegion(5, 5, 0, 10)
    with pytest.raises(ValidationError):
        ImageRegion(-1, 5, 0, 10)
    a = ImageRegion(0, 10, 0, 10)
    b = ImageRegion(10, 20, 0, 10)
    assert not a.overlaps(b)
    assert a.overlaps(ImageRegion(9, 11, 5, 6))
    assert a.n_pixels == 100
    with pytest.raises(ValidationError):
        a.check_inside((5, 50))


def test_frame_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.integers(0, 65536, size=(7, 9)).astype(np.float64)
    frame = Frame(data, shot_id="s042", role="reference")
    path = tmp_path / "frame.pgm"
    write_frame(path, frame)
    back = read_frame(path)
    assert np.array_equal(back.data, data)
    assert back.shot_id == "s042"
    assert back.role == "reference"


def test_frame_file_errors(tmp_path):
    too_hot = Frame(np.full((2, 2), 70000.0))
    with pytest.raises(ValidationError, match="16-bit"):
        write_frame(tmp_path / "hot.pgm", too_hot)

    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P6 2 2 65535\n\x00\x00")
    with pytest.raises(DataFileError, match="P5"):
        read_frame(bad)

    eight_bit = tmp_path / "small.pgm"
    eight_bit.write_bytes(b"P5 1 1 255\n\x00")
    with pytest.raises(DataFileError, match="maxval"):
        read_frame(eight_bit)

    stub = tmp_path / "short.pgm"
    stub.write_bytes(b"P5 4 4 65535\n\x00\x00")
    with pytest.raises(DataFileError, match="truncated"):
        read_frame(stub)


def test_missing_sidecar_gets_defaults(tmp_path):
    path = tmp_path / "plain.pgm"
    write_frame(path, Frame(np.ones((3, 3)), shot_id="x", role="reference"))
    (tmp_path / "plain.pgm.meta").unlink()
    back = read_frame(path)
    assert back.shot_id == "" and back.role == "signal"


# ---------------------------------------------------------------------------
# synthesis and optical density

def test_noiseless_shot_reproduces_od_exactly():
    rng = np.random.default_rng(0)
    band = _band(4.5)
    sig, ref, record = synthesize_shot(SHAPE, [band], QUIET, CLEAN, rng, "t0")
    od = optical_density(sig, ref)
    from tuneoutkit.imaging import _od_field

    truth = _od_field(SHAPE, [band])
    assert od.clamped_pixels == 0
    assert np.max(np.abs(od.data - truth)) < 1e-12
    assert record.shot_id == "t0"
    assert record.bands == (band,)


def test_geometry_overflow_rejected():
    rng = np.random.default_rng(0)
    wide = _band(4.5, n_orders=2)
    with pytest.raises(ValidationError, match="overflow"):
        synthesize_shot((60, 120), [wide], QUIET, CLEAN, rng)
    tall = _band(4.5, row_center=5.0)
    with pytest.raises(ValidationError, match="overflow"):
        synthesize_shot(SHAPE, [tall], QUIET, CLEAN, rng)


def test_fringe_spec_validation():
    with pytest.raises(ValidationError):
        FringeSpec(amplitudes=(0.6, 0.6), periods_px=(10.0, 20.0), angles=(0.0, 0.1))
    with pytest.raises(ValidationError):
        FringeSpec(amplitudes=(0.1,), periods_px=(10.0, 20.0), angles=(0.0, 0.1))
    with pytest.raises(ValidationError):
        NoiseSpec(illumination_counts=0.0)


def test_optical_density_clamps_and_flags():
    sig = Frame(np.array([[100.0, 0.0, 1.0e-9], [100.0, 50.0, 60.0]]))
    ref = Frame(np.array([[100.0, 100.0, 100.0], [0.0, 100.0, 100.0]]))
    od = optical_density(sig, ref, cap=1.0)
    assert od.data[0, 0] == 0.0 and od.valid[0, 0]
    assert od.data[0, 1] == 1.0 and not od.valid[0, 1]   # zero signal
    assert od.data[0, 2] == 1.0 and not od.valid[0, 2]   # beyond the cap
    assert not od.valid[1, 0]                            # zero reference
    assert od.valid[1, 1] and od.data[1, 1] == pytest.approx(math.log(2.0))
    assert od.valid[1, 2]
    assert od.clamped_pixels == 3
    with pytest.raises(ValidationError):
        optical_density(sig, Frame(np.ones((3, 3))))


def test_snr_contract():
    rng = np.random.default_rng(11)
    img = rng.normal(0.0, 1.0, size=(40, 40))
    sig_reg = ImageRegion(10, 20, 10, 20)
    bg_reg = ImageRegion(25, 35, 10, 20)
    img[sig_reg.index] += 8.0
    one = snr(img, sig_reg, bg_reg)
    img[sig_reg.index] += 8.0
    two = snr(img, sig_reg, bg_reg)
    assert two == pytest.approx(2.0 * one, rel=0.05)
    assert snr(np.ones((40, 40)), sig_reg, bg_reg) == math.inf
    with pytest.raises(ValidationError, match="overlap"):
        snr(img, sig_reg, ImageRegion(15, 25, 10, 20))


# ---------------------------------------------------------------------------
# reference basis

def _reference_set(n, rng, fringe=None, noise=None):
    fringe = fringe or FringeSpec()
    noise = noise or NoiseSpec(illumination_counts=1200.0)
    return [
        synthesize_reference(SHAPE, fringe, noise, rng, shot_id=f"r{k}")
        for k in range(n)
    ]


def test_basis_rank_counts_distinct_frames():
    rng = np.random.default_rng(5)
    noiseless = NoiseSpec(illumination_counts=1200.0, poisson=False)
    distinct = _reference_set(3, rng, noise=noiseless)
    basis = build_reference_basis(distinct + distinct[:2], MASK)
    assert basis.n_frames == 5
    assert basis.rank == 3
    assert basis.eigenvalues.size == basis.rank


def test_basis_version_tracks_masked_content():
    rng = np.random.default_rng(6)
    frames = _reference_set(4, rng)
    a = build_reference_basis(frames, MASK)
    b = build_reference_basis(frames, MASK)
    assert a.version == b.version
    bumped = frames[0].data.copy()
    bumped[5, 5] += 1.0                                   # inside the mask
    frames2 = [Frame(bumped, "r0", "reference")] + frames[1:]
    assert build_reference_basis(frames2, MASK).version != a.version


def test_basis_frame_cap_and_shape_check():
    rng = np.random.default_rng(7)
    frames = _reference_set(3, rng)
    with pytest.raises(ValidationError, match="cap"):
        build_reference_basis(frames, MASK, max_frames=2)
    odd = Frame(np.ones((10, 10)), "odd", "reference")
    with pytest.raises(ValidationError):
        build_reference_basis(frames + [odd], MASK)
    with pytest.raises(ValidationError):
        build_reference_basis([], MASK)


def test_compose_is_least_squares_on_mask():
    rng = np.random.default_rng(8)
    frames = _reference_set(25, rng)
    small = build_reference_basis(frames[:5], MASK)
    full = build_reference_basis(frames, MASK)
    band = _band(4.5)
    sig, _, _ = synthesize_shot(
        SHAPE, [band], FringeSpec(), NoiseSpec(illumination_counts=1200.0), rng
    )
    comp_small = compose_reference(sig, small)
    comp_full = compose_reference(sig, full)
    # a superset basis can only lower the masked residual
    assert comp_full.masked_residual_rms <= comp_small.masked_residual_rms + 1e-9
    assert comp_full.basis_version == full.version
    assert comp_full.frame.role == "reference"

    # the residual is orthogonal to the basis span on the mask
    target = sig.data[MASK.index].ravel()
    residual = target - full.masked.T @ comp_full.coefficients
    along = full.masked @ residual
    scale = np.linalg.norm(full.masked, axis=1) * np.linalg.norm(residual)
    assert np.max(np.abs(along) / scale) < 1e-8


def test_composed_reference_beats_stored_reference():
    """Fringe drift leaves stripes in raw OD that the composition removes."""
    rng = np.random.default_rng(9)
    frames = _reference_set(30, rng)
    basis = build_reference_basis(frames, MASK)
    band = _band(4.5)
    sig, ref, _ = synthesize_shot(
        SHAPE, [band], FringeSpec(), NoiseSpec(illumination_counts=1200.0), rng
    )
    raw = optical_density(sig, ref)
    fixed = optical_density(sig, compose_reference(sig, basis).frame, reference_kind="composed")
    quiet = ImageRegion(0, 11, 0, 160).index
    assert np.std(fixed.data[quiet]) < 0.5 * np.std(raw.data[quiet])
    assert fixed.reference_kind == "composed"


def test_benchmark_compose_returns_positive_times():
    rng = np.random.default_rng(10)
    frames = _reference_set(6, rng)
    basis = build_reference_basis(frames, MASK)
    sig, _, _ = synthesize_shot(
        SHAPE, [_band(4.5)], FringeSpec(), NoiseSpec(illumination_counts=1200.0), rng
    )
    times = benchmark_compose(basis, [sig], repeats=3)
    assert times.shape == (3,)
    assert np.all(times > 0)


# ---------------------------------------------------------------------------
# band fitting

def test_noiseless_population_extraction_is_exact():
    rng = np.random.default_rng(1)
    band = _band(4.5)
    sig, ref, _ = synthesize_shot(SHAPE, [band], QUIET, CLEAN, rng)
    od = optical_density(sig, ref)
    layout = _layout(band)
    pops, fit = extract_populations(od, [layout])[band.m_f]
    truth_total = sum(band.populations.values())
    for n, p in band.populations.items():
        assert pops.order(n) == pytest.approx(p / truth_total, abs=1e-6)
    assert fit.reduced_chi2 < 1e-6
    assert fit.spacing_px == pytest.approx(band.order_spacing_px, abs=1e-3)


def test_population_sigmas_have_detection_floor():
    """Empty orders must not come back with vanishing uncertainty."""
    rng = np.random.default_rng(2)
    band = _band(0.3)      # almost everything in N = 0
    sig, ref, _ = synthesize_shot(SHAPE, [band], QUIET, CLEAN, rng)
    od = optical_density(sig, ref)
    pops, fit = extract_populations(od, [_layout(band)])[band.m_f]
    for n in pops.populations:
        assert pops.uncertainties[n] > 0
    floor = fit.profile_sigma * math.sqrt(
        2.0 * math.sqrt(math.pi) * fit.peak(2).bec_width_px
    ) / sum(p.bec_area for p in fit.peaks)
    assert pops.uncertainties[2] >= 0.99 * floor


def test_band_model_profile_matches_fit():
    rng = np.random.default_rng(4)
    band = _band(7.5)
    sig, ref, _ = synthesize_shot(SHAPE, [band], QUIET, CLEAN, rng)
    od = optical_density(sig, ref)
    layout = _layout(band)
    fit = fit_band(od, layout)
    profile, excluded = band_profile(od, layout)
    model = band_model_profile(fit, np.arange(profile.size))
    assert excluded == 0
    assert np.max(np.abs(model - profile)) < 1e-3 * profile.max()


def test_two_bands_fit_independently():
    rng = np.random.default_rng(12)
    up = _band(6.0, m_f=1, row_center=18.0)
    down = _band(2.0, m_f=-1, row_center=44.0)
    sig, ref, _ = synthesize_shot(SHAPE, [up, down], QUIET, CLEAN, rng)
    od = optical_density(sig, ref)
    out = extract_populations(od, [_layout(up), _layout(down)])
    assert set(out) == {1, -1}
    for band in (up, down):
        pops, _ = out[band.m_f]
        total = sum(band.populations.values())
        for n, p in band.populations.items():
            assert pops.order(n) == pytest.approx(p / total, abs=5e-4)


def test_noisy_composed_chain_recovers_populations():
    rng = np.random.default_rng(13)
    noise = NoiseSpec(illumination_counts=24000.0)
    frames = [
        synthesize_reference(SHAPE, FringeSpec(), noise, rng, f"r{k}")
        for k in range(12)
    ]
    basis = build_reference_basis(frames, MASK)
    band = _band(4.5)
    sig, _, _ = synthesize_shot(SHAPE, [band], FringeSpec(), noise, rng)
    od = optical_density(sig, compose_reference(sig, basis).frame, reference_kind="composed")
    pops, _ = extract_populations(od, [_layout(band)])[band.m_f]
    total = sum(band.populations.values())
    for n, p in band.populations.items():
        pull = (pops.order(n) - p / total) / pops.uncertainties[n]
        assert abs(pull) < 5.0


def test_band_layout_validation():
    with pytest.raises(ValidationError):
        BandLayout(0, 10, 10, 80.0, 22.0, 2)
    with pytest.raises(ValidationError):
        BandLayout(0, 5, 10, 80.0, -1.0, 2)
    rng = np.random.default_rng(14)
    band = _band(1.0)
    sig, ref, _ = synthesize_shot(SHAPE, [band], QUIET, CLEAN, rng)
    od = optical_density(sig, ref)
    off_image = BandLayout(0, 18, 42, 180.0, 30.0, 2)
    with pytest.raises(ValidationError, match="leave"):
        fit_band(od, off_image)
