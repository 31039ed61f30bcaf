"""Batch command-line front end for the toolkit.

Each subcommand wraps one pipeline stage: polarizability tables, tune-out
root finding with the contribution budget, diffraction simulation,
synthetic shot generation, image analysis, and the polarization and
background-field fits.  Options come from an optional JSON config file,
overridden by repeated ``--set key=value`` flags; unknown keys are
rejected before any computation runs.

Outputs are line-delimited JSON records plus flat CSV tables, written
into ``--out``.  Every record embeds the sha-256 digest of the
scientific options (delivery knobs ``out``/``plot``/``jobs`` excluded),
so reruns with the same seed and config are byte-identical.  With
``--plot``, each command also renders its figures as PNG files next to
the tables.

Exit codes: 0 success, 1 validation, 2 computation, 3 fit
non-convergence.
"""

import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import metadata, resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import fit_models, imaging, kd
from .atomic_data import HyperfineState, load_species_data
from .errors import (
    ComputationError,
    FitNonConvergenceError,
    ToolkitError,
    ValidationError,
)
from .polarizability import (
    Components,
    LightField,
    lattice_depth,
    polarizability_set,
    recoil_energy_hz,
)
from .tuneout import contribution_ledger, find_tuneout, linear_model

# ledger rows mix units: roots are absolute wavelengths in nm, the
# term-by-term shifts are in pm
_LEDGER_UNITS = {"root": "nm", "shift": "pm"}

__all__ = ["RunConfig", "make_config", "main"]

try:
    _VERSION = metadata.version("tuneoutkit")
except metadata.PackageNotFoundError:  # running from a source tree
    _VERSION = "0+unknown"

# Delivery knobs: where results go and how they are rendered.  They do
# not change the numbers, so they stay out of the config digest.
_DELIVERY_KEYS = frozenset({"out", "plot", "jobs"})


class Opt(NamedTuple):
    kind: str          # float | int | bool | str | floats | ints
    default: object
    required: bool = False
    help: str = ""


_COMMON = {
    "out": Opt("str", None, True, "output directory"),
    "plot": Opt("bool", False, False, "render PNG figures next to the tables"),
    "jobs": Opt("int", 1, False, "worker cap for parallel stages"),
    "species": Opt("str", None, False, "species data file (default: bundled Rb-87)"),
}

_TOGGLES = {
    "tensor": Opt("bool", True, False, "include the tensor term"),
    "vector": Opt("bool", True, False, "include the vector term"),
    "residual_6p": Opt("bool", True, False, "include the 5s-6p residual"),
    "residual_core": Opt("bool", True, False, "include the core + cv residual"),
}

_LIGHT = {
    "intensity_w_m2": Opt("float", None, True, "single-beam intensity in W/m^2"),
    "pol_angle": Opt("float", 0.0, False, "ellipticity angle (rad); A = sin 2*theta"),
    "k_angle": Opt("float", 0.0, False, "angle between k and the quantization axis"),
    "pol_axis_angle": Opt("float", math.pi / 2, False,
                          "linear-polarization angle to the quantization axis"),
}

SCHEMAS = {
    "polarizability": {
        **_COMMON, **_TOGGLES, **_LIGHT,
        "lambda_min_nm": Opt("float", None, True, "grid start"),
        "lambda_max_nm": Opt("float", None, True, "grid end"),
        "points": Opt("int", 101, False, "grid size"),
        "f": Opt("int", 1, False, "hyperfine level"),
        "m_f": Opt("ints", (0,), False, "sublevels to tabulate"),
        "guard_hz": Opt("float", 60e6, False, "resonance guard half-width"),
    },
    "tuneout": {
        **_COMMON, **_TOGGLES, **_LIGHT,
        "f": Opt("int", 1, False, "hyperfine level"),
        "m_f": Opt("int", 0, False, "sublevel"),
        "bracket_nm": Opt("floats", None, False, "root bracket override"),
        "xtol_nm": Opt("float", 1e-6, False, "root tolerance"),
        "propagate": Opt("bool", True, False, "propagate dataset uncertainties"),
        "mc_samples": Opt("int", 0, False, "Monte-Carlo uncertainty samples"),
        "seed": Opt("int", None, False, "RNG seed (required when mc_samples > 0)"),
        "linear_points": Opt("int", 201, False, "grid size for the linear model"),
        "linear_halfwidth_pm": Opt("float", None, False,
                                   "evaluate the linear model over root +- this "
                                   "instead of the thin-grating window"),
    },
    "kd-simulate": {
        **_COMMON,
        "depth_min_e_r": Opt("float", 0.5, False, "depth grid start"),
        "depth_max_e_r": Opt("float", 40.0, False, "depth grid end"),
        "depth_points": Opt("int", 80, False, "depth grid size"),
        "wavelength_nm": Opt("float", 790.0185, False, "lattice wavelength for E_r"),
        "duration_us": Opt("float", 12.0, False, "nominal pulse length"),
        "edge_us": Opt("float", 1.7, False, "switching time constant"),
        "envelope_samples": Opt("int", 1201, False, "pulse profile resolution"),
        "tau_eff_us": Opt("float", None, False, "effective duration override"),
        "n_max": Opt("int", None, False, "highest diffraction order"),
        "warn_fraction": Opt("float", 0.2, False, "thin-grating warning margin"),
        "roundtrip": Opt("bool", False, False, "also invert each population set"),
        "noise_fraction": Opt("float", 0.0, False, "relative population noise"),
        "noise_floor": Opt("float", 1e-4, False, "population weight floor"),
        "seed": Opt("int", None, False, "RNG seed (required when noise_fraction > 0)"),
    },
    "synth-data": {
        **_COMMON,
        "seed": Opt("int", None, True, "RNG seed"),
        "rows": Opt("int", 150, False, "frame height"),
        "cols": Opt("int", 320, False, "frame width"),
        "n_references": Opt("int", 24, False, "atom-free library size"),
        "lambda_m_nm": Opt("float", 790.0185, False, "injected zero crossing"),
        "slope_e_r_per_pm": Opt("float", 0.5, False, "injected depth slope"),
        "lambda_min_nm": Opt("float", 790.0035, False, "scan start"),
        "lambda_max_nm": Opt("float", 790.0335, False, "scan end"),
        "scan_points": Opt("int", 20, False, "wavelengths in the scan"),
        "shots_per_wavelength": Opt("int", 5, False, "repeats per wavelength"),
        "tau_eff_us": Opt("float", 8.6997, False, "effective pulse duration"),
        "wavelength_nm": Opt("float", 790.0185, False, "lattice wavelength for E_r"),
        "m_f": Opt("int", 0, False, "sublevel of the imaged band"),
        "row_center": Opt("float", 75.0, False, "band row position"),
        "center_col": Opt("float", 160.0, False, "zeroth-order column"),
        "order_spacing_px": Opt("float", 38.0, False, "diffraction-order spacing"),
        "vertical_sigma_px": Opt("float", 6.0, False, "band height"),
        "bec_sigma_px": Opt("float", 3.0, False, "condensed peak width"),
        "thermal_sigma_px": Opt("float", 11.0, False, "thermal pedestal width"),
        "thermal_area_fraction": Opt("float", 0.25, False, "pedestal area share"),
        "peak_od": Opt("float", 1.4, False, "condensed peak OD at unit population"),
        "min_population": Opt("float", 1e-4, False,
                              "orders below this stay out of the geometry"),
        "mask_row0": Opt("int", 110, False, "signal-free mask rows start"),
        "mask_row1": Opt("int", 150, False, "signal-free mask rows end"),
        "fringe_amplitudes": Opt("floats", (0.10, 0.06), False, "fringe contrasts"),
        "fringe_periods_px": Opt("floats", (17.3, 41.7), False, "fringe periods"),
        "fringe_angles": Opt("floats", (0.12, 1.02), False, "fringe orientations"),
        "fringe_drift_sigma": Opt("float", 2.0, False, "phase drift per pair"),
        # high probe level: tiny diffraction peaks must clear the 16-bit
        # quantization step of the frame files
        "illumination_counts": Opt("float", 24000.0, False, "probe level"),
        "poisson": Opt("bool", True, False, "photon shot noise"),
        "readout_sigma": Opt("float", 0.0, False, "camera read noise"),
    },
    "analyze-images": {
        **_COMMON,
        "data_dir": Opt("str", None, True, "directory with manifest.jsonl + frames"),
        "max_frames": Opt("int", 500, False, "reference library cap"),
        "rank_tol": Opt("float", 1e-12, False, "basis rank cutoff"),
        "od_cap": Opt("float", 6.0, False, "optical-density clamp"),
        "noise_floor": Opt("float", 1e-4, False, "population weight floor"),
        "detection_threshold": Opt("float", 0.0, False, "drop orders below this"),
        "fit_scan": Opt("bool", True, False, "fit the zero crossing when possible"),
        "wavelength_sigma_nm": Opt("float", 1e-4, False,
                                   "calibration allowance added to the reported "
                                   "crossing uncertainty"),
    },
    "fit-polarization": {
        **_COMMON,
        "points_csv": Opt("str", None, True, "scan table (control = wavelength)"),
        "lambda_m_nm": Opt("float", None, True, "held zero crossing"),
        "intensity_w_m2": Opt("float", None, True, "single-beam intensity in W/m^2"),
        "f": Opt("int", 1, False, "hyperfine level"),
        "convention": Opt("str", "full", False, "vector weight: full (m/F) or half"),
    },
    "fit-bfield": {
        **_COMMON,
        "z_csv": Opt("str", None, True, "z-axis scan table (control = applied G)"),
        "x_csv": Opt("str", None, True, "x-axis scan table"),
        "y_csv": Opt("str", None, False, "optional y-axis validation scan"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated options for one subcommand run."""

    subcommand: str
    options: dict
    digest: str

    def __getitem__(self, key):
        return self.options[key]


def _coerce(sub, key, opt: Opt, value):
    err = lambda what: ValidationError(
        f"{sub}: option '{key}' {what} (got {value!r})")
    if value is None:
        return None
    if opt.kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise err("must be a number")
        try:
            out = float(value)
        except ValueError:
            raise err("must be a number") from None
        if not math.isfinite(out):
            raise err("must be finite")
        return out
    if opt.kind == "int":
        if isinstance(value, bool):
            raise err("must be an integer")
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise err("must be an integer") from None
        if isinstance(value, float) and value != int(value):
            raise err("must be an integer")
        if not isinstance(value, (int, float)):
            raise err("must be an integer")
        return int(value)
    if opt.kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise err("must be true or false")
    if opt.kind == "str":
        if not isinstance(value, str):
            raise err("must be a string")
        return value
    if opt.kind in ("floats", "ints"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise err("must be a list")
        inner = Opt("float" if opt.kind == "floats" else "int", None)
        return tuple(_coerce(sub, key, inner, v) for v in value)
    raise AssertionError(f"unhandled option kind {opt.kind}")


def make_config(subcommand, options) -> RunConfig:
    """Validate options against the subcommand schema and stamp a digest."""
    if subcommand not in SCHEMAS:
        raise ValidationError(f"unknown subcommand '{subcommand}'")
    schema = SCHEMAS[subcommand]
    unknown = sorted(set(options) - set(schema))
    if unknown:
        raise ValidationError(
            f"{subcommand}: unknown config keys: {', '.join(unknown)}")
    merged = {}
    for key, opt in schema.items():
        value = _coerce(subcommand, key, opt, options.get(key, opt.default))
        if value is None and opt.required:
            raise ValidationError(f"{subcommand}: option '{key}' is required")
        merged[key] = value
    science = {k: v for k, v in sorted(merged.items()) if k not in _DELIVERY_KEYS}
    digest = hashlib.sha256(
        json.dumps({"subcommand": subcommand, "options": _jsonable(science)},
                   sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    return RunConfig(subcommand, merged, digest)


# ---------------------------------------------------------------------------
# serialization helpers

def _jsonable(value):
    """Reduce numpy scalars/arrays and tuples to plain JSON material."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            clean = {k: v for k, v in _jsonable(rec).items() if v is not None}
            fh.write(json.dumps(clean, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def _fmt_cell(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_cell(row[h]) for h in header])


def read_scan_points(path, m_f_default=0):
    """Load (control, depth, sigma[, m_f, shots]) rows into ScanPoints."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"scan table not found: {path}")
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"control", "depth_e_r", "sigma_e_r"}
        have = set(reader.fieldnames or ())
        if not needed <= have:
            raise ValidationError(
                f"{path.name}: missing columns {sorted(needed - have)}")
        for i, row in enumerate(reader):
            try:
                points.append(fit_models.ScanPoint(
                    control=float(row["control"]),
                    depth_e_r=float(row["depth_e_r"]),
                    sigma_e_r=float(row["sigma_e_r"]),
                    m_f=int(row.get("m_f") or m_f_default),
                    shots=int(row.get("shots") or 1),
                ))
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path.name}, row {i + 2}: {exc}") from None
    if not points:
        raise ValidationError(f"{path.name}: no data rows")
    return points


def _load_species(config):
    path = config["species"]
    if path is None:
        path = resources.files("tuneoutkit") / "data" / "rb87.species"
    else:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"species data file not found: {path}")
    return load_species_data(path), Path(str(path)).name


def _run_record(config, species_name=None, inputs=()):
    rec = {
        "record": "run",
        "subcommand": config.subcommand,
        "config_digest": config.digest,
        "package": f"tuneoutkit {_VERSION}",
    }
    if species_name:
        rec["species"] = species_name
    if inputs:
        rec["inputs"] = sorted(Path(p).name for p in inputs)
    return rec


def _out_dir(config) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _components(config) -> Components:
    return Components(
        tensor=config["tensor"], vector=config["vector"],
        residual_6p=config["residual_6p"], residual_core=config["residual_core"],
    )


def _light(config, wavelength_nm) -> LightField:
    return LightField(
        wavelength_nm=wavelength_nm,
        intensity_w_m2=config["intensity_w_m2"],
        pol_angle=config["pol_angle"],
        k_angle=config["k_angle"],
        pol_axis_angle=config["pol_axis_angle"],
    )


# ---------------------------------------------------------------------------
# subcommands

def cmd_polarizability(config: RunConfig) -> int:
    """Tabulate (alpha_s, alpha_v, alpha_t, depth) over a wavelength grid."""
    species, species_name = _load_species(config)
    out = _out_dir(config)
    comps = _components(config)
    if config["lambda_min_nm"] >= config["lambda_max_nm"]:
        raise ValidationError("polarizability: empty wavelength grid")
    grid = np.linspace(config["lambda_min_nm"], config["lambda_max_nm"],
                       config["points"])
    rows = []
    for lam in grid:
        light = _light(config, float(lam))
        for m_f in config["m_f"]:
            state = HyperfineState(config["f"], int(m_f))
            pol = polarizability_set(state, float(lam), species, comps,
                                     guard_hz=config["guard_hz"])
            shift = lattice_depth(state, light, species, comps,
                                  guard_hz=config["guard_hz"])
            rows.append({
                "wavelength_nm": float(lam),
                "m_f": int(m_f),
                "alpha_scalar_au": pol.scalar,
                "alpha_vector_au": pol.vector,
                "alpha_tensor_au": pol.tensor,
                "effective_alpha_au": shift.effective_alpha_au,
                "depth_e_r": shift.e_r,
            })
    header = ["wavelength_nm", "m_f", "alpha_scalar_au", "alpha_vector_au",
              "alpha_tensor_au", "effective_alpha_au", "depth_e_r"]
    _write_csv(out / "polarizability.csv", header, rows)
    records = [_run_record(config, species_name)]
    records.append({
        "record": "grid",
        "points": len(grid),
        "lambda_min_nm": float(grid[0]),
        "lambda_max_nm": float(grid[-1]),
        "m_f": list(config["m_f"]),
        "table": "polarizability.csv",
    })
    _write_jsonl(out / "polarizability.jsonl", records)
    if config["plot"]:
        from . import report
        report.render_polarizability(rows, out / "polarizability.png")
    return 0


def cmd_tuneout(config: RunConfig) -> int:
    """Find the zero crossing and emit the per-term contribution budget."""
    species, species_name = _load_species(config)
    out = _out_dir(config)
    comps = _components(config)
    if config["mc_samples"] > 0 and config["seed"] is None:
        raise ValidationError("tuneout: seed is required when mc_samples > 0")
    state = HyperfineState(config["f"], config["m_f"])
    light = _light(config, 790.0)
    bracket = config["bracket_nm"]
    if bracket is not None:
        if len(bracket) != 2:
            raise ValidationError("tuneout: bracket_nm needs exactly two values")
        bracket = tuple(bracket)
    result = find_tuneout(state, light, species, comps, bracket=bracket,
                          xtol_nm=config["xtol_nm"])
    grid = None
    if config["linear_halfwidth_pm"] is not None:
        half = config["linear_halfwidth_pm"] / 1e3
        grid = np.linspace(result.wavelength_nm - half,
                           result.wavelength_nm + half,
                           config["linear_points"])
    lin = linear_model(state, light, species, wavelengths_nm=grid,
                       components=comps, points=config["linear_points"])
    ledger = contribution_ledger(state, light, species,
                                 propagate=config["propagate"],
                                 mc_samples=config["mc_samples"],
                                 seed=config["seed"])
    ledger_rows = [{
        "name": row.name,
        "kind": row.kind,
        "value": row.value,
        "unc": row.unc,
        "unit": _LEDGER_UNITS[row.kind],
    } for row in ledger.rows]
    _write_csv(out / "tuneout_ledger.csv",
               ["name", "kind", "value", "unc", "unit"], ledger_rows)
    records = [_run_record(config, species_name)]
    records.append({
        "record": "tuneout",
        "wavelength_nm": result.wavelength_nm,
        "slope_e_r_per_pm": result.slope_e_r_per_pm,
        "bracket_nm": list(result.bracket_nm),
        "n_evaluations": result.n_evaluations,
        "linear_lambda0_nm": lin.lambda0_nm,
        "linear_slope_e_r_per_pm": lin.slope_e_r_per_pm,
        "linear_max_rel_deviation": lin.max_rel_deviation,
        "linear_window_nm": list(lin.window_nm),
        "additivity_defect_pm": ledger.additivity_defect_pm,
        "dataset": ledger.dataset,
        "table": "tuneout_ledger.csv",
    })
    _write_jsonl(out / "tuneout.jsonl", records)
    if config["plot"]:
        from . import report
        report.render_tuneout_ledger(ledger_rows, out / "tuneout_budget.png")
    return 0


def cmd_kd_simulate(config: RunConfig) -> int:
    """Populations over a depth grid, optionally noisy-inverted back."""
    out = _out_dir(config)
    species, species_name = _load_species(config)
    noise = config["noise_fraction"]
    if noise < 0:
        raise ValidationError("kd-simulate: noise_fraction must be >= 0")
    if noise > 0 and config["seed"] is None:
        raise ValidationError("kd-simulate: seed is required when noise_fraction > 0")
    recoil = recoil_energy_hz(config["wavelength_nm"], species.mass.value)
    if config["tau_eff_us"] is not None:
        tau_eff = config["tau_eff_us"]
        profile_rec = {"record": "pulse", "tau_eff_us": tau_eff, "source": "override"}
    else:
        profile = kd.exponential_edge_envelope(
            config["duration_us"], config["edge_us"], config["envelope_samples"])
        tau_eff = kd.effective_pulse_duration(profile)
        profile_rec = {
            "record": "pulse",
            "tau_eff_us": tau_eff,
            "nominal_duration_us": config["duration_us"],
            "edge_us": config["edge_us"],
            "source": "switching-edge model",
        }
    if config["depth_min_e_r"] <= 0 or config["depth_min_e_r"] >= config["depth_max_e_r"]:
        raise ValidationError("kd-simulate: bad depth grid")
    grid = np.linspace(config["depth_min_e_r"], config["depth_max_e_r"],
                       config["depth_points"])
    rng = np.random.default_rng(config["seed"]) if noise > 0 else None
    rows, inversions = [], []
    for depth in grid:
        pops = kd.diffraction_populations(float(depth), tau_eff, recoil,
                                          n_max=config["n_max"])
        verdict = kd.raman_nath_check(float(depth), tau_eff,
                                      config["warn_fraction"])
        for order in sorted(pops.populations, key=lambda n: (abs(n), n)):
            rows.append({
                "depth_e_r": float(depth),
                "order": order,
                "population": pops.populations[order],
                "regime": verdict.verdict,
            })
        if config["roundtrip"]:
            use = pops
            if rng is not None:
                noisy, sigmas = {}, {}
                for order, p in pops.populations.items():
                    s = max(noise * p, 1e-6)
                    noisy[order] = max(p + rng.normal(0.0, s), 0.0)
                    sigmas[order] = s
                use = kd.MomentumPopulations(noisy, sigmas)
            est = kd.invert_depth(use, tau_eff, recoil,
                                  noise_floor=config["noise_floor"])
            inversions.append({
                "record": "roundtrip",
                "depth_in_e_r": float(depth),
                "depth_out_e_r": est.depth_e_r,
                "sigma_e_r": est.sigma_e_r,
                "pull": (est.depth_e_r - float(depth)) / est.sigma_e_r
                if est.sigma_e_r > 0 else None,
            })
    _write_csv(out / "kd_populations.csv",
               ["depth_e_r", "order", "population", "regime"], rows)
    records = [_run_record(config, species_name), profile_rec]
    records.append({
        "record": "grid",
        "recoil_hz": recoil,
        "depth_min_e_r": float(grid[0]),
        "depth_max_e_r": float(grid[-1]),
        "points": len(grid),
        "table": "kd_populations.csv",
    })
    records.extend(inversions)
    _write_jsonl(out / "kd_simulate.jsonl", records)
    if config["plot"]:
        from . import report
        report.render_kd_populations(rows, out / "kd_populations.png")
    return 0


def _scan_layout(config, n_orders):
    return imaging.BandLayout(
        m_f=config["m_f"],
        row0=int(config["row_center"] - 4.0 * config["vertical_sigma_px"]),
        row1=int(config["row_center"] + 4.0 * config["vertical_sigma_px"]) + 1,
        center_col=config["center_col"],
        order_spacing_px=config["order_spacing_px"],
        n_orders=n_orders,
    )


def cmd_synth_data(config: RunConfig) -> int:
    """Write a synthetic wavelength scan: frames plus a manifest."""
    out = _out_dir(config)
    species, species_name = _load_species(config)
    rng = np.random.default_rng(config["seed"])
    shape = (config["rows"], config["cols"])
    recoil = recoil_energy_hz(config["wavelength_nm"], species.mass.value)
    tau_eff = config["tau_eff_us"]
    if config["lambda_min_nm"] >= config["lambda_max_nm"]:
        raise ValidationError("synth-data: empty wavelength scan")
    lambdas = np.linspace(config["lambda_min_nm"], config["lambda_max_nm"],
                          config["scan_points"])
    slope = config["slope_e_r_per_pm"]
    lambda_m = config["lambda_m_nm"]

    # Order count follows the deepest point of the scan, keeping only
    # orders populated above the detection-floor setting; the exact tail
    # would demand frame columns for peaks far below the noise.
    max_depth = max(abs(slope * (lam - lambda_m) * 1e3) for lam in lambdas)
    kd.raman_nath_check(max_depth, tau_eff)
    deepest = kd.diffraction_populations(max_depth, tau_eff, recoil).populations
    n_orders = max(
        [1] + [abs(n) for n, p in deepest.items() if p >= config["min_population"]])

    fringe = imaging.FringeSpec(
        amplitudes=config["fringe_amplitudes"],
        periods_px=config["fringe_periods_px"],
        angles=config["fringe_angles"],
        drift_sigma=config["fringe_drift_sigma"],
    )
    noise = imaging.NoiseSpec(
        illumination_counts=config["illumination_counts"],
        poisson=config["poisson"],
        readout_sigma=config["readout_sigma"],
    )
    mask = imaging.ImageRegion(config["mask_row0"], config["mask_row1"],
                               0, shape[1])
    layout = _scan_layout(config, n_orders)
    if layout.row1 > mask.row0 and layout.row0 < mask.row1:
        raise ValidationError("synth-data: band rows overlap the reference mask")

    records = [_run_record(config, species_name)]
    records.append({
        "record": "geometry",
        "shape": list(shape),
        "mask": [mask.row0, mask.row1, mask.col0, mask.col1],
        "layouts": [{
            "m_f": layout.m_f, "row0": layout.row0, "row1": layout.row1,
            "center_col": layout.center_col,
            "order_spacing_px": layout.order_spacing_px,
            "n_orders": layout.n_orders,
        }],
        "tau_eff_us": tau_eff,
        "recoil_hz": recoil,
        "truth": {"lambda_m_nm": lambda_m, "slope_e_r_per_pm": slope},
    })
    for i in range(config["n_references"]):
        frame = imaging.synthesize_reference(shape, fringe, noise, rng,
                                             shot_id=f"ref_{i:03d}")
        imaging.write_frame(out / f"ref_{i:03d}.pgm", frame)
        records.append({"record": "reference", "file": f"ref_{i:03d}.pgm"})

    table = []
    shot_index = 0
    first_signal = None
    for lam in lambdas:
        depth = abs(slope * (float(lam) - lambda_m) * 1e3)
        pops = kd.diffraction_populations(depth, tau_eff, recoil)
        truth_pops = {n: p for n, p in pops.populations.items()
                      if abs(n) <= n_orders}
        band = imaging.BandTruth(
            m_f=config["m_f"],
            populations=truth_pops,
            row_center=config["row_center"],
            center_col=config["center_col"],
            order_spacing_px=config["order_spacing_px"],
            vertical_sigma_px=config["vertical_sigma_px"],
            bec_sigma_px=config["bec_sigma_px"],
            thermal_sigma_px=config["thermal_sigma_px"],
            thermal_area_fraction=config["thermal_area_fraction"],
            peak_od=config["peak_od"],
        )
        for _ in range(config["shots_per_wavelength"]):
            shot_id = f"shot_{shot_index:04d}"
            signal, reference, _rec = imaging.synthesize_shot(
                shape, [band], fringe, noise, rng, shot_id=shot_id)
            imaging.write_frame(out / f"{shot_id}_sig.pgm", signal)
            imaging.write_frame(out / f"{shot_id}_ref.pgm", reference)
            if first_signal is None:
                first_signal = signal
            records.append({
                "record": "shot",
                "shot_id": shot_id,
                "file_signal": f"{shot_id}_sig.pgm",
                "file_reference": f"{shot_id}_ref.pgm",
                "wavelength_nm": float(lam),
                "m_f": config["m_f"],
                "truth_depth_e_r": depth,
            })
            table.append({
                "shot_id": shot_id,
                "wavelength_nm": float(lam),
                "truth_depth_e_r": depth,
            })
            shot_index += 1
    _write_jsonl(out / "manifest.jsonl", records)
    _write_csv(out / "synth_shots.csv",
               ["shot_id", "wavelength_nm", "truth_depth_e_r"], table)
    if config["plot"] and first_signal is not None:
        from . import report
        report.render_frame_preview(first_signal.data, out / "synth_preview.png")
    return 0


def _read_manifest(data_dir: Path):
    manifest = data_dir / "manifest.jsonl"
    if not manifest.is_file():
        contents = sorted(p.name for p in data_dir.iterdir()) if data_dir.is_dir() else []
        if not contents:
            raise ValidationError(f"analyze-images: no input data in {data_dir}")
        raise ValidationError(
            f"analyze-images: {manifest} is missing (directory holds "
            f"{len(contents)} entries but no manifest)")
    geometry, references, shots = None, [], []
    with open(manifest) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(
                    f"manifest.jsonl, line {i + 1}: {exc}") from None
            kind = rec.get("record")
            if kind == "geometry":
                geometry = rec
            elif kind == "reference":
                references.append(rec["file"])
            elif kind == "shot":
                shots.append(rec)
    if geometry is None:
        raise ValidationError("manifest.jsonl carries no geometry record")
    if not references:
        raise ValidationError("manifest.jsonl lists no reference frames")
    if not shots:
        raise ValidationError("manifest.jsonl lists no signal shots")
    return geometry, references, shots


def _analyze_one(shot, data_dir, basis, layouts, geometry, config):
    signal = imaging.read_frame(data_dir / shot["file_signal"])
    composed = imaging.compose_reference(signal, basis)
    od = imaging.optical_density(signal, composed.frame,
                                 cap=config["od_cap"],
                                 reference_kind="composed")
    rec = {
        "record": "shot",
        "shot_id": shot["shot_id"],
        "residual_rms": composed.masked_residual_rms,
        "clamped_pixels": od.clamped_pixels,
    }
    if "wavelength_nm" in shot:
        rec["wavelength_nm"] = shot["wavelength_nm"]
    try:
        extracted = imaging.extract_populations(od, layouts)
        m_f = layouts[0].m_f
        pops, peak_fit = extracted[m_f]
        est = kd.invert_depth(pops, geometry["tau_eff_us"], geometry["recoil_hz"],
                              noise_floor=config["noise_floor"],
                              detection_threshold=config["detection_threshold"])
    except ToolkitError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec, None
    rec.update({
        "m_f": m_f,
        "populations": {str(n): p for n, p in sorted(pops.populations.items())},
        "depth_e_r": est.depth_e_r,
        "sigma_e_r": est.sigma_e_r,
        "phase": est.phase,
        "fit_reduced_chi2": peak_fit.reduced_chi2,
    })
    return rec, (od, peak_fit)


def cmd_analyze_images(config: RunConfig) -> int:
    """Run frames through referencing, OD, peak fits and depth inversion."""
    out = _out_dir(config)
    data_dir = Path(config["data_dir"])
    geometry, references, shots = _read_manifest(data_dir)
    mask = imaging.ImageRegion(*geometry["mask"])
    layouts = [imaging.BandLayout(
        m_f=g["m_f"], row0=g["row0"], row1=g["row1"],
        center_col=g["center_col"], order_spacing_px=g["order_spacing_px"],
        n_orders=g["n_orders"]) for g in geometry["layouts"]]
    ref_frames = [imaging.read_frame(data_dir / name) for name in references]
    basis = imaging.build_reference_basis(ref_frames, mask,
                                          max_frames=config["max_frames"],
                                          rank_tol=config["rank_tol"])
    jobs = max(config["jobs"], 1)
    work = lambda shot: _analyze_one(shot, data_dir, basis, layouts,
                                     geometry, config)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            analyzed = list(pool.map(work, shots))
    else:
        analyzed = [work(shot) for shot in shots]

    records = [_run_record(config, inputs=["manifest.jsonl"])]
    records.append({
        "record": "basis",
        "frames": len(ref_frames),
        "rank": basis.rank,
        "version": basis.version,
        "mask": geometry["mask"],
    })
    table, points, first_detail = [], [], None
    for shot, (rec, detail) in zip(shots, analyzed):
        records.append(rec)
        if "error" in rec:
            continue
        if first_detail is None:
            first_detail = detail
        row = {
            "shot_id": rec["shot_id"],
            "wavelength_nm": rec.get("wavelength_nm", ""),
            "m_f": rec["m_f"],
            "depth_e_r": rec["depth_e_r"],
            "sigma_e_r": rec["sigma_e_r"],
            "residual_rms": rec["residual_rms"],
        }
        table.append(row)
        if "wavelength_nm" in rec and rec["sigma_e_r"] > 0:
            points.append(fit_models.ScanPoint(
                control=rec["wavelength_nm"], depth_e_r=rec["depth_e_r"],
                sigma_e_r=rec["sigma_e_r"], m_f=rec["m_f"]))
    n_failed = sum(1 for rec, _ in analyzed if "error" in rec)
    if n_failed == len(shots):
        raise ComputationError("analyze-images: every shot failed analysis")
    _write_csv(out / "analysis_shots.csv",
               ["shot_id", "wavelength_nm", "m_f", "depth_e_r", "sigma_e_r",
                "residual_rms"], table)

    scan_fit = None
    if config["fit_scan"] and len({p.control for p in points}) >= 3:
        scan_fit = fit_models.fit_tuneout_scan(
            points, wavelength_sigma_nm=config["wavelength_sigma_nm"])
        records.append({
            "record": "scan_fit",
            "lambda_m_nm": scan_fit.lambda_m_nm,
            "lambda_m_sigma_nm": scan_fit.lambda_m_sigma_nm,
            "slope_e_r_per_pm": scan_fit.slope_e_r_per_pm,
            "slope_sigma": scan_fit.slope_sigma,
            "n_points": len(points),
            "reduced_chi2": scan_fit.fit.reduced_chi2,
        })
    _write_jsonl(out / "analysis.jsonl", records)
    if config["plot"]:
        from . import report
        if first_detail is not None:
            od, peak_fit = first_detail
            profile, _ = imaging.band_profile(od, layouts[0])
            cols = np.arange(profile.size)
            model = imaging.band_model_profile(peak_fit, cols)
            report.render_band_fit(cols, profile, model, layouts[0].m_f,
                                   out / "analysis_band.png")
        if scan_fit is not None:
            report.render_scan_fit(points, scan_fit, out / "analysis_scan.png")
    return 0


def cmd_fit_polarization(config: RunConfig) -> int:
    """Joint circular-branch fit of the residual polarization."""
    out = _out_dir(config)
    species, species_name = _load_species(config)
    points = read_scan_points(config["points_csv"])
    light = LightField(wavelength_nm=config["lambda_m_nm"],
                       intensity_w_m2=config["intensity_w_m2"])
    result = fit_models.fit_polarization(
        points, config["lambda_m_nm"], light, species,
        f=config["f"], convention=config["convention"])
    records = [_run_record(config, species_name, inputs=[config["points_csv"]])]
    records.append({
        "record": "polarization_fit",
        "a0": result.a0,
        "a0_sigma": result.a0_sigma,
        "spread_a": result.spread_a,
        "spread_a_sigma": result.spread_a_sigma,
        "slope_e_r_per_pm": result.slope_e_r_per_pm,
        "slope_sigma": result.slope_sigma,
        "lambda_m_nm": result.lambda_m_nm,
        "convention": result.convention,
        "spread_at_zero": result.spread_at_zero,
        "reduced_chi2": result.fit.reduced_chi2,
    })
    _write_jsonl(out / "fit_polarization.jsonl", records)
    _write_csv(out / "fit_polarization.csv",
               ["parameter", "value", "sigma"],
               [{"parameter": "a0", "value": result.a0, "sigma": result.a0_sigma},
                {"parameter": "spread_a", "value": result.spread_a,
                 "sigma": result.spread_a_sigma},
                {"parameter": "slope_e_r_per_pm", "value": result.slope_e_r_per_pm,
                 "sigma": result.slope_sigma}])
    if config["plot"]:
        from . import report
        unit = fit_models.vector_depth_unit(light, species, config["f"])
        curves = {}
        lam_grid = np.linspace(min(p.control for p in points),
                               max(p.control for p in points), 300)
        for m_f in (1, -1):
            curves[m_f] = (lam_grid, fit_models.polarization_branch_depth(
                lam_grid, m_f, result.lambda_m_nm, result.slope_e_r_per_pm,
                result.a0, result.spread_a, unit, f=config["f"],
                convention=result.convention))
        report.render_polarization_scan(points, curves,
                                        out / "fit_polarization.png")
    return 0


def cmd_fit_bfield(config: RunConfig) -> int:
    """Sequential per-axis reconstruction of the background field."""
    out = _out_dir(config)
    z_scan = read_scan_points(config["z_csv"])
    x_scan = read_scan_points(config["x_csv"])
    y_scan = read_scan_points(config["y_csv"]) if config["y_csv"] else None
    result = fit_models.fit_background_field(z_scan, x_scan, y_scan=y_scan)
    inputs = [config["z_csv"], config["x_csv"]]
    if config["y_csv"]:
        inputs.append(config["y_csv"])
    records = [_run_record(config, inputs=inputs)]
    records.append({
        "record": "bfield_fit",
        "background_g": list(result.background_g),
        "sigma_g": list(result.sigma_g),
        "amp_e_r": result.amp_e_r,
        "amp_sigma": result.amp_sigma,
        "rho_xy_from_z": result.rho_xy_from_z,
        "rho_xy_sigma": result.rho_xy_sigma,
        "z_reduced_chi2": result.z_fit.reduced_chi2,
        "x_reduced_chi2": result.x_fit.reduced_chi2,
        "y_reduced_chi2": result.y_scan_reduced_chi2,
    })
    _write_jsonl(out / "fit_bfield.jsonl", records)
    axis_rows = [
        {"axis": "x", "background_g": result.background_g[0],
         "sigma_g": result.sigma_g[0]},
        {"axis": "y", "background_g": result.background_g[1],
         "sigma_g": result.sigma_g[1]},
        {"axis": "z", "background_g": result.background_g[2],
         "sigma_g": result.sigma_g[2]},
    ]
    _write_csv(out / "fit_bfield.csv", ["axis", "background_g", "sigma_g"],
               axis_rows)
    if config["plot"]:
        from . import report
        scans = {"z": z_scan, "x": x_scan}
        if y_scan:
            scans["y"] = y_scan
        curves = {}
        b0 = result.background_g
        for axis_name, axis_idx, pts in (("z", 2, z_scan), ("x", 0, x_scan)):
            grid = np.linspace(min(p.control for p in pts),
                               max(p.control for p in pts), 300)
            curves[axis_name] = (grid, fit_models.bfield_scan_depth(
                grid, axis_idx, b0, result.amp_e_r))
        report.render_bfield_scan(scans, curves, out / "fit_bfield.png")
    return 0


_COMMANDS = {
    "polarizability": cmd_polarizability,
    "tuneout": cmd_tuneout,
    "kd-simulate": cmd_kd_simulate,
    "synth-data": cmd_synth_data,
    "analyze-images": cmd_analyze_images,
    "fit-polarization": cmd_fit_polarization,
    "fit-bfield": cmd_fit_bfield,
}


class _Parser(argparse.ArgumentParser):
    # usage problems must map onto the validation exit code, not
    # argparse's default SystemExit(2)
    def error(self, message):
        raise ValidationError(message)


def _parse_set(pairs):
    options = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if not key:
            raise ValidationError(f"--set expects key=value, got '{pair}'")
        try:
            options[key] = json.loads(raw)
        except json.JSONDecodeError:
            options[key] = raw
    return options


def _build_parser():
    parser = _Parser(prog="tuneoutkit",
                     description="batch pipelines for the tune-out toolkit")
    parser.add_argument("--version", action="version",
                        version=f"tuneoutkit {_VERSION}")
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    for name in _COMMANDS:
        sp = sub.add_parser(name, help=_COMMANDS[name].__doc__,
                            description=_COMMANDS[name].__doc__)
        sp.add_argument("--config", help="JSON file with options")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one option (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--plot", action="store_true", default=None,
                        help="render PNG figures")
        sp.add_argument("--jobs", type=int, help="worker cap")
    return parser


def load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path.name}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path.name} must hold a JSON object")
    return data


def _run(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_help(sys.stderr)
        return 1
    options = {}
    if args.config:
        options.update(load_config_file(args.config))
    options.update(_parse_set(args.set))
    if args.out is not None:
        options["out"] = args.out
    if args.plot is not None:
        options["plot"] = args.plot
    if args.jobs is not None:
        options["jobs"] = args.jobs
    config = make_config(args.subcommand, options)
    return _COMMANDS[args.subcommand](config)


def main(argv=None) -> int:
    try:
        return _run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FitNonConvergenceError as exc:
        print(f"fit did not converge: {exc}", file=sys.stderr)
        return 3
    except ToolkitError as exc:
        # remaining toolkit failures are computation problems
        print(f"computation failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
