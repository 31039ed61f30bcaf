"""Figure rendering for the batch pipelines.

Every renderer takes plain table data (lists of dicts, the same rows the
CSV writers receive) and writes a PNG next to the delimited output.  All
figures use the Agg backend so the pipelines stay headless; nothing here
is needed for the numerical results.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_polarizability",
    "render_tuneout_ledger",
    "render_kd_populations",
    "render_band_fit",
    "render_frame_preview",
    "render_polarization_scan",
    "render_bfield_scan",
    "render_scan_fit",
]

# One consistent look for every figure the CLI emits.
_FIGSIZE = (6.4, 4.2)
_DPI = 150


def _new_axes(title, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    # no creation date in the PNG text chunks, so reruns stay comparable
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return str(path)


def render_polarizability(rows, path):
    """Depth vs wavelength, one curve per m_F, zero line marked.

    ``rows`` carry wavelength_nm, m_f and depth_e_r columns; rows sharing
    an m_f form one curve.
    """
    fig, ax = _new_axes("Lattice depth across the D lines",
                        "wavelength (nm)", "depth ($E_r$)")
    by_mf = {}
    for row in rows:
        by_mf.setdefault(int(row["m_f"]), []).append(
            (float(row["wavelength_nm"]), float(row["depth_e_r"])))
    for m_f in sorted(by_mf):
        pts = sorted(by_mf[m_f])
        lam = [p[0] for p in pts]
        dep = [p[1] for p in pts]
        ax.plot(lam, dep, label=f"$m_F = {m_f:+d}$" if m_f else "$m_F = 0$")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.legend()
    return _save(fig, path)


def render_tuneout_ledger(ledger_rows, path):
    """Horizontal bar chart of the per-term zero-crossing shifts in pm."""
    shifts = [r for r in ledger_rows if r["kind"] == "shift"]
    fig, ax = _new_axes("Zero-crossing budget", "shift (pm)", "")
    names = [r["name"] for r in shifts]
    vals = [float(r["value"]) for r in shifts]
    errs = [float(r["unc"]) for r in shifts]
    y = np.arange(len(names))
    ax.barh(y, vals, xerr=errs, height=0.6, color="tab:blue", alpha=0.8)
    ax.set_yticks(y, names)
    ax.axvline(0.0, color="k", lw=0.8)
    ax.invert_yaxis()
    return _save(fig, path)


def render_kd_populations(rows, path):
    """Diffracted-order populations vs pulse depth."""
    fig, ax = _new_axes("Diffraction populations", "depth ($E_r$)",
                        "population")
    by_order = {}
    for row in rows:
        by_order.setdefault(int(row["order"]), []).append(
            (float(row["depth_e_r"]), float(row["population"])))
    for order in sorted(by_order, key=abs):
        pts = sorted(by_order[order])
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                label=f"$N = {order:+d}$" if order else "$N = 0$")
    ax.legend(ncols=2, fontsize=8)
    return _save(fig, path)


def render_band_fit(profile_px, profile_od, model_od, m_f, path):
    """Measured band profile with the fitted multi-peak model overlaid."""
    fig, ax = _new_axes(f"Band profile, $m_F = {m_f:+d}$"
                        if m_f else "Band profile, $m_F = 0$",
                        "column (px)", "integrated OD")
    ax.plot(profile_px, profile_od, ".", ms=3, color="0.4", label="data")
    ax.plot(profile_px, model_od, "-", color="tab:red", label="fit")
    ax.legend()
    return _save(fig, path)


def render_frame_preview(data, path):
    """Raw camera counts as an image, for eyeballing synthetic shots."""
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    im = ax.imshow(data, cmap="magma", origin="upper", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="counts")
    ax.set_title("Synthetic exposure")
    ax.set_xlabel("column (px)")
    ax.set_ylabel("row (px)")
    return _save(fig, path)


def render_polarization_scan(points, fit_curves, path):
    """Depth vs wavelength for both circular branches with fitted folds.

    ``fit_curves`` maps m_f -> (lam_nm array, depth array).
    """
    fig, ax = _new_axes("Polarization branches", "wavelength (nm)",
                        "depth ($E_r$)")
    colors = {1: "tab:blue", -1: "tab:orange"}
    for m_f in (1, -1):
        sel = [p for p in points if p.m_f == m_f]
        if sel:
            ax.errorbar([p.control for p in sel],
                        [p.depth_e_r for p in sel],
                        yerr=[p.sigma_e_r for p in sel],
                        fmt="o", ms=4, color=colors[m_f],
                        label=f"$m_F = {m_f:+d}$")
        if m_f in fit_curves:
            lam, dep = fit_curves[m_f]
            ax.plot(lam, dep, "-", color=colors[m_f], alpha=0.7)
    ax.legend()
    return _save(fig, path)


def render_bfield_scan(scans, fit_curves, path):
    """Depth vs applied field per axis, with fit overlays where present."""
    fig, ax = _new_axes("Applied-field scans", "applied field (G)",
                        "depth ($E_r$)")
    colors = {"x": "tab:blue", "y": "tab:green", "z": "tab:red"}
    for axis, pts in scans.items():
        ax.errorbar([p.control for p in pts],
                    [p.depth_e_r for p in pts],
                    yerr=[p.sigma_e_r for p in pts],
                    fmt="o", ms=4, color=colors[axis],
                    label=f"{axis} scan")
        if axis in fit_curves:
            ctrl, dep = fit_curves[axis]
            ax.plot(ctrl, dep, "-", color=colors[axis], alpha=0.7)
    ax.legend()
    return _save(fig, path)


def render_scan_fit(points, fit, path):
    """Tune-out scan with the folded-line model and recovered root."""
    fig, ax = _new_axes("Tune-out scan", "wavelength (nm)", "depth ($E_r$)")
    lam = np.array([p.control for p in points])
    dep = np.array([p.depth_e_r for p in points])
    sig = np.array([p.sigma_e_r for p in points])
    ax.errorbar(lam, dep, yerr=sig, fmt="o", ms=4, color="0.3", label="data")
    grid = np.linspace(lam.min(), lam.max(), 400)
    model = np.abs(fit.slope_e_r_per_pm * (grid - fit.lambda_m_nm) * 1e3)
    ax.plot(grid, model, "-", color="tab:red", alpha=0.8, label="fit")
    ax.axvline(fit.lambda_m_nm, color="tab:red", lw=0.8, ls="--")
    ax.legend()
    return _save(fig, path)
