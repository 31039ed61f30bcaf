"""Species data: file format, quantum-number bookkeeping, hyperfine structure.

Data file grammar (version header mandatory, one entry per line):

    format = species-data/1        first non-comment line
    [section]                      section header
    key = value ~ unc ! source     numeric entry; "~ unc" optional, source not
    key = value                    non-numeric entry (labels, names)
    # ...                          full-line comment

Every numeric entry must carry a provenance string after "!".  Spins may be
written as fractions ("3/2").  Loading keeps the literal value tokens, and
`serialize_species_data` re-emits them, so a load/serialize round trip
preserves the decimal representations exactly.

Angular-momentum conventions: reduced dipole matrix elements are stored in
the common data-sheet normalization (e.g. 4.2275 e a0 for the Rb-87 D2
line).  `reduced_hf_matrix_element` returns F-basis reduced elements in the
3j-symbol convention, i.e. sum over F' of the squared elements equals
(2F + 1) times the squared line element.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

from .errors import DataFileError, ValidationError
from .wigner import wigner_6j

FORMAT_TAG = "species-data/1"


def parse_half_integer(text, context="value"):
    """Parse '2', '3/2', '1.5' into a Fraction with denominator 1 or 2."""
    text = str(text).strip()
    try:
        if "/" in text:
            frac = Fraction(text)
        else:
            frac = Fraction(text).limit_denominator(2)
            if abs(float(frac) - float(text)) > 1e-9:
                raise ValueError
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"{context}: '{text}' is not a half-integer")
    if frac.denominator not in (1, 2):
        raise ValidationError(f"{context}: '{text}' is not a half-integer")
    return frac


@dataclass(frozen=True)
class Datum:
    """One measured number: value, 1-sigma uncertainty, provenance."""

    value: float
    unc: float
    source: str
    raw_value: Optional[str] = None
    raw_unc: Optional[str] = None

    def token_value(self):
        return self.raw_value if self.raw_value is not None else repr(self.value)

    def token_unc(self):
        if self.raw_unc is not None:
            return self.raw_unc
        return repr(self.unc) if self.unc else None


@dataclass(frozen=True)
class HyperfineState:
    """Hyperfine ground-state sublevel |F, m_F>."""

    f: Fraction
    m_f: Fraction

    def __post_init__(self):
        object.__setattr__(self, "f", parse_half_integer(self.f, "F"))
        object.__setattr__(self, "m_f", parse_half_integer(self.m_f, "m_F"))
        if self.f < 0:
            raise ValidationError(f"F = {self.f} must be non-negative")
        if abs(self.m_f) > self.f:
            raise ValidationError(f"|m_F| = {abs(self.m_f)} exceeds F = {self.f}")
        if (self.f - self.m_f).denominator != 1:
            raise ValidationError(
                f"m_F = {self.m_f} must differ from F = {self.f} by an integer"
            )


_LEVEL_RE = re.compile(r"^(\d+)([SPDF])(\d+(?:/\d+)?)$")


def parse_level_label(label):
    """'5P3/2' -> (n, L letter, J as Fraction)."""
    m = _LEVEL_RE.match(label.strip())
    if not m:
        raise ValidationError(f"cannot parse level label '{label}'")
    return int(m.group(1)), m.group(2), parse_half_integer(m.group(3), f"J of {label}")


@dataclass(frozen=True)
class TransitionLine:
    """One fine-structure line with hyperfine constants on both levels."""

    label: str
    lower_level: str
    upper_level: str
    frequency: Datum          # line centroid, Hz
    a_lower: Datum            # magnetic-dipole hyperfine constant, Hz
    b_lower: Datum            # electric-quadrupole hyperfine constant, Hz
    a_upper: Datum
    b_upper: Datum
    dipole: Optional[Datum] = None   # reduced element, e a0, data-sheet convention

    @property
    def j_lower(self):
        return parse_level_label(self.lower_level)[2]

    @property
    def j_upper(self):
        return parse_level_label(self.upper_level)[2]


@dataclass(frozen=True)
class SpeciesData:
    name: str
    mass: Datum                       # kg
    nuclear_spin: Fraction
    lines: tuple                      # TransitionLine, dipoles resolved
    alpha_6p_plus: Datum              # scalar residual, atomic units
    alpha_core_valence: Datum         # scalar residual, atomic units
    parametrization: str              # "ratio" or "direct"
    d32: Datum                        # e a0
    ratio_r: Datum                    # dimensionless |d32|^2 / |d12|^2
    d12: Datum                        # e a0, used by "direct"

    def line(self, label) -> TransitionLine:
        for ln in self.lines:
            if ln.label == label:
                return ln
        raise ValidationError(f"species {self.name} has no line '{label}'")

    def ground_f_values(self):
        """Allowed ground-state F for the lower level of the first line."""
        j = self.lines[0].j_lower
        i = self.nuclear_spin
        fmin, fmax = abs(i - j), i + j
        return [fmin + k for k in range(int(fmax - fmin) + 1)]


def hyperfine_level_energy(a_hz, b_hz, i, j, f):
    """Hyperfine shift of |F> from the (n, J) centroid, in Hz.

    Standard magnetic-dipole plus electric-quadrupole form; the quadrupole
    term exists only for I, J >= 1 and b_hz must be zero otherwise.
    """
    i, j, f = (Fraction(x) for x in (i, j, f))
    k = float(f * (f + 1) - i * (i + 1) - j * (j + 1))
    energy = 0.5 * a_hz * k
    denom = 2 * i * (2 * i - 1) * 2 * j * (2 * j - 1)
    if denom != 0:
        num = 1.5 * k * (k + 1) - 2 * float(i * (i + 1) * j * (j + 1))
        energy += b_hz * num / float(denom)
    elif b_hz != 0.0:
        raise ValidationError(
            f"quadrupole constant must vanish for I={i}, J={j} (got {b_hz} Hz)"
        )
    return energy


def excited_f_values(i, j_upper):
    i, j_upper = Fraction(i), Fraction(j_upper)
    fmin, fmax = abs(i - j_upper), i + j_upper
    return [fmin + k for k in range(int(fmax - fmin) + 1)]


def transition_frequency(line, i, f_lower, f_upper):
    """Frequency of |F> -> |F'> in Hz, both hyperfine offsets included."""
    return (
        line.frequency.value
        + hyperfine_level_energy(line.a_upper.value, line.b_upper.value, i, line.j_upper, f_upper)
        - hyperfine_level_energy(line.a_lower.value, line.b_lower.value, i, line.j_lower, f_lower)
    )


def reduced_hf_matrix_element(line, i, f_lower, f_upper):
    """|<F || d || F'>| in e a0, 3j convention (see module docstring).

    Zero when the hyperfine transition is dipole-forbidden.
    """
    if line.dipole is None:
        raise ValidationError(f"line {line.label} has no resolved dipole element")
    j, jp = line.j_lower, line.j_upper
    six = wigner_6j(f_lower, 1, f_upper, jp, i, j)
    scale = float((2 * j + 1) * (2 * Fraction(f_lower) + 1) * (2 * Fraction(f_upper) + 1))
    return line.dipole.value * (scale ** 0.5) * abs(six)


# ---------------------------------------------------------------------------
# file parsing


def _parse_entry(line_text, lineno, path):
    if "=" not in line_text:
        raise DataFileError(f"{path}:{lineno}: expected 'key = value', got '{line_text}'")
    key, rest = line_text.split("=", 1)
    key = key.strip()
    source = None
    if "!" in rest:
        rest, source = rest.split("!", 1)
        source = source.strip()
    tokens = rest.strip().split("~")
    value_tok = tokens[0].strip()
    unc_tok = tokens[1].strip() if len(tokens) > 1 else None
    if len(tokens) > 2:
        raise DataFileError(f"{path}:{lineno}: more than one '~' in entry '{key}'")
    return key, value_tok, unc_tok, source


def _numeric_datum(entries, section, key, path, required=True):
    if key not in entries.get(section, {}):
        if required:
            raise DataFileError(f"{path}: missing mandatory entry '{key}' in [{section}]")
        return None
    value_tok, unc_tok, source, lineno = entries[section][key]
    if source is None:
        raise DataFileError(
            f"{path}:{lineno}: numeric entry '{key}' in [{section}] lacks a '!' source"
        )
    try:
        value = float(Fraction(value_tok)) if "/" in value_tok else float(value_tok)
    except ValueError:
        raise DataFileError(f"{path}:{lineno}: cannot parse value '{value_tok}' for '{key}'")
    unc = 0.0
    if unc_tok is not None:
        try:
            unc = float(unc_tok)
        except ValueError:
            raise DataFileError(f"{path}:{lineno}: cannot parse uncertainty '{unc_tok}' for '{key}'")
    if unc < 0:
        raise DataFileError(f"{path}:{lineno}: negative uncertainty for '{key}'")
    return Datum(value, unc, source, raw_value=value_tok, raw_unc=unc_tok)


def _text_entry(entries, section, key, path):
    if key not in entries.get(section, {}):
        raise DataFileError(f"{path}: missing mandatory entry '{key}' in [{section}]")
    return entries[section][key][0]


def _resolve_dipoles(species: SpeciesData) -> SpeciesData:
    """Fill per-line dipole elements from the chosen parametrization."""
    d32 = species.d32
    if species.parametrization == "ratio":
        r = species.ratio_r
        v = d32.value / r.value ** 0.5
        unc = v * ((d32.unc / d32.value) ** 2 + (r.unc / (2 * r.value)) ** 2) ** 0.5
        d12 = Datum(v, unc, f"derived: d32 / sqrt(R), from [{d32.source}] and [{r.source}]")
    elif species.parametrization == "direct":
        d12 = species.d12
    else:
        raise ValidationError(
            f"unknown matrix-element parametrization '{species.parametrization}'"
        )
    lines = []
    for ln in species.lines:
        if ln.j_upper == Fraction(3, 2):
            lines.append(replace(ln, dipole=d32))
        elif ln.j_upper == Fraction(1, 2):
            lines.append(replace(ln, dipole=d12))
        else:
            raise ValidationError(f"unsupported upper level J = {ln.j_upper} on {ln.label}")
    return replace(species, lines=tuple(lines))


def load_species_text(text, path="<string>", parametrization=None):
    entries = {}
    order = []
    section = None
    format_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if not format_seen:
            key, value_tok, _, _ = _parse_entry(stripped, lineno, path)
            if key != "format" or value_tok != FORMAT_TAG:
                raise DataFileError(
                    f"{path}:{lineno}: first entry must be 'format = {FORMAT_TAG}'"
                )
            format_seen = True
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section in entries:
                raise DataFileError(f"{path}:{lineno}: duplicate section [{section}]")
            entries[section] = {}
            order.append(section)
            continue
        if section is None:
            raise DataFileError(f"{path}:{lineno}: entry before any [section]")
        key, value_tok, unc_tok, source = _parse_entry(stripped, lineno, path)
        if key in entries[section]:
            raise DataFileError(f"{path}:{lineno}: duplicate key '{key}' in [{section}]")
        entries[section][key] = (value_tok, unc_tok, source, lineno)
    if not format_seen:
        raise DataFileError(f"{path}: empty file, expected 'format = {FORMAT_TAG}' header")

    name = _text_entry(entries, "species", "name", path)
    mass = _numeric_datum(entries, "species", "mass_kg", path)
    spin = parse_half_integer(
        _numeric_datum(entries, "species", "nuclear_spin", path).token_value(),
        "nuclear_spin",
    )

    lines = []
    for sec in order:
        if not sec.startswith("line "):
            continue
        label = sec.split(None, 1)[1]
        line = TransitionLine(
            label=label,
            lower_level=_text_entry(entries, sec, "lower_level", path),
            upper_level=_text_entry(entries, sec, "upper_level", path),
            frequency=_numeric_datum(entries, sec, "frequency_hz", path),
            a_lower=_numeric_datum(entries, sec, "lower_a_hfs_hz", path),
            b_lower=_numeric_datum(entries, sec, "lower_b_hfs_hz", path),
            a_upper=_numeric_datum(entries, sec, "upper_a_hfs_hz", path),
            b_upper=_numeric_datum(entries, sec, "upper_b_hfs_hz", path),
        )
        # quadrupole consistency is enforced here so file errors surface early
        for a, b, j in ((line.a_lower, line.b_lower, line.j_lower),
                        (line.a_upper, line.b_upper, line.j_upper)):
            hyperfine_level_energy(a.value, b.value, spin, j, abs(spin - j))
        lines.append(line)
    if not lines:
        raise DataFileError(f"{path}: no [line ...] sections found")
    labels = [ln.label for ln in lines]
    for mandatory in ("D1", "D2"):
        if mandatory not in labels:
            raise DataFileError(f"{path}: missing mandatory section [line {mandatory}]")

    mode = parametrization or _text_entry(entries, "matrix_elements", "parametrization", path)
    if mode not in ("ratio", "direct"):
        raise DataFileError(
            f"{path}: parametrization must be 'ratio' or 'direct', got '{mode}'"
        )
    species = SpeciesData(
        name=name,
        mass=mass,
        nuclear_spin=spin,
        lines=tuple(lines),
        alpha_6p_plus=_numeric_datum(entries, "scalar_residuals", "alpha_6p_plus_au", path),
        alpha_core_valence=_numeric_datum(entries, "scalar_residuals", "alpha_core_valence_au", path),
        parametrization=mode,
        d32=_numeric_datum(entries, "matrix_elements", "d32_ea0", path),
        ratio_r=_numeric_datum(entries, "matrix_elements", "ratio_R", path),
        d12=_numeric_datum(entries, "matrix_elements", "d12_ea0", path),
    )
    return _resolve_dipoles(species)


def load_species_data(path, parametrization=None):
    with open(path, "r", encoding="utf-8") as fh:
        return load_species_text(fh.read(), path=str(path), parametrization=parametrization)


def _emit(key, datum: Datum):
    parts = [f"{key} = {datum.token_value()}"]
    tok_unc = datum.token_unc()
    if tok_unc is not None:
        parts.append(f"~ {tok_unc}")
    parts.append(f"! {datum.source}")
    return " ".join(parts)


def serialize_species_data(species: SpeciesData) -> str:
    """Write a SpeciesData back out in the file grammar (see module docstring)."""
    spin = species.nuclear_spin
    spin_tok = f"{spin.numerator}/{spin.denominator}" if spin.denominator != 1 else str(spin)
    out = [f"format = {FORMAT_TAG}", "", "[species]", f"name = {species.name}",
           _emit("mass_kg", species.mass),
           f"nuclear_spin = {spin_tok} ! exact quantum number"]
    out += ["", "[scalar_residuals]",
            _emit("alpha_6p_plus_au", species.alpha_6p_plus),
            _emit("alpha_core_valence_au", species.alpha_core_valence)]
    for ln in species.lines:
        out += ["", f"[line {ln.label}]",
                f"lower_level = {ln.lower_level}",
                f"upper_level = {ln.upper_level}",
                _emit("frequency_hz", ln.frequency),
                _emit("lower_a_hfs_hz", ln.a_lower),
                _emit("lower_b_hfs_hz", ln.b_lower),
                _emit("upper_a_hfs_hz", ln.a_upper),
                _emit("upper_b_hfs_hz", ln.b_upper)]
    out += ["", "[matrix_elements]",
            f"parametrization = {species.parametrization}",
            _emit("d32_ea0", species.d32),
            _emit("ratio_R", species.ratio_r),
            _emit("d12_ea0", species.d12)]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# uncertainty bookkeeping


def uncertain_data(species: SpeciesData):
    """(key, Datum) pairs that carry nonzero uncertainty under the active mode."""
    pairs = [("matrix.d32", species.d32)]
    if species.parametrization == "ratio":
        pairs.append(("matrix.ratio_r", species.ratio_r))
    else:
        pairs.append(("matrix.d12", species.d12))
    pairs += [
        ("residual.alpha_6p_plus", species.alpha_6p_plus),
        ("residual.alpha_core_valence", species.alpha_core_valence),
    ]
    for ln in species.lines:
        pairs += [
            (f"line.{ln.label}.frequency", ln.frequency),
            (f"line.{ln.label}.a_lower", ln.a_lower),
            (f"line.{ln.label}.b_lower", ln.b_lower),
            (f"line.{ln.label}.a_upper", ln.a_upper),
            (f"line.{ln.label}.b_upper", ln.b_upper),
        ]
    return [(k, d) for k, d in pairs if d.unc > 0]


def with_value(species: SpeciesData, key: str, value: float) -> SpeciesData:
    """Copy of `species` with one datum's central value replaced (re-resolved)."""

    def bump(d: Datum) -> Datum:
        return Datum(value, d.unc, d.source)

    if key.startswith("matrix."):
        field = {"d32": "d32", "ratio_r": "ratio_r", "d12": "d12"}[key.split(".", 1)[1]]
        species = replace(species, **{field: bump(getattr(species, field))})
    elif key.startswith("residual."):
        field = {"alpha_6p_plus": "alpha_6p_plus",
                 "alpha_core_valence": "alpha_core_valence"}[key.split(".", 1)[1]]
        species = replace(species, **{field: bump(getattr(species, field))})
    elif key.startswith("line."):
        _, label, attr = key.split(".")
        lines = []
        for ln in species.lines:
            if ln.label == label:
                ln = replace(ln, **{attr: bump(getattr(ln, attr))})
            lines.append(ln)
        species = replace(species, lines=tuple(lines))
    elif key == "mass":
        species = replace(species, mass=bump(species.mass))
    else:
        raise ValidationError(f"unknown datum key '{key}'")
    return _resolve_dipoles(species)
