"""Configuration files, CSV tables and run manifests.

A configuration is a flat list of ``key = value`` lines; ``#`` starts a
comment.  Keys are the SystemParams field names (SI units), ``preset``,
or one of the unit-suffixed aliases in :data:`UNIT_KEYS`.  ``isotope_<name> = <mass in u>``
adds a name that ``m_a`` and ``m_b`` may then use.  Entries are
resolved in stages so that ratios such as ``U_over_Ep`` see the final
masses and couplings regardless of their position in the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import numbers
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError
from .params import (
    ISOTOPES,
    K_B,
    SystemParams,
    check_validity,
    derive_scales,
    healing_length,
    isotope_mass,
    preset,
    recoil_energy,
    repin_dressed_hopping,
    to_natural,
)

_SI_FIELDS = ("m_a", "m_b", "lam", "J", "U", "mu", "kappa", "g", "n0", "sigma", "T", "M", "J_tilde")


def _E_R(ctx):
    return recoil_energy(ctx["m_a"], ctx["lam"])


UNIT_KEYS = {
    "J_over_ER": "J",
    "Jt_over_ER": "J_tilde",
    "J_tilde_over_ER": "J_tilde",
    "U_over_ER": "U",
    "U_over_Ep": "U",
    "mu_over_ER": "mu",
    "kappa_over_ERlambda": "kappa",
    "g_over_ERlambda": "g",
    "n0_per_m": "n0",
    "sigma_over_a": "sigma",
    "T_nK": "T",
    "T_over_Ep": "T",
    "lambda": "lam",
    "lambda_nm": "lam",
}

_STAGE_MASS = {"m_a", "m_b", "lam", "lambda", "lambda_nm"}
_STAGE_EP = {"U_over_Ep", "T_over_Ep"}


@dataclass(frozen=True)
class ConfigEntry:
    key: str
    value: str
    line: int | None
    source: str


def _parse_lines(text, source):
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}: expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ValidationError(f"{source}: empty key or value", field=key or None, line=lineno)
        entries.append(ConfigEntry(key, value, lineno, source))
    return entries


def _parse_overrides(overrides):
    entries = []
    for i, item in enumerate(overrides or (), start=1):
        if "=" not in item:
            raise ValidationError(f"override {i}: expected key=value, got {item!r}", line=i)
        key, value = (s.strip() for s in item.split("=", 1))
        entries.append(ConfigEntry(key, value, i, "override"))
    return entries


def _number(entry):
    try:
        x = float(entry.value)
    except ValueError:
        raise ValidationError(f"{entry.source}: malformed number {entry.value!r}", field=entry.key,
                              line=entry.line) from None
    if not math.isfinite(x):
        raise ValidationError(f"{entry.source}: value must be finite", field=entry.key, line=entry.line)
    return x


def _closed_Ep(ctx):
    xi = healing_length(ctx["m_b"], ctx["g"], ctx["n0"])
    return ctx["kappa"] ** 2 / (2 * xi * ctx["g"])


def _mass(entry, table):
    if entry.value in table:
        return isotope_mass(entry.value, table)
    try:
        return _number(entry)
    except ValidationError:
        raise ValidationError(f"{entry.source}: {entry.value!r} is neither a mass in kg nor a known isotope",
                              field=entry.key, line=entry.line) from None


def parse_config_text(text: str, overrides=(), source: str = "<config>") -> SystemParams:
    """Resolve configuration text plus ``key=value`` overrides into SystemParams."""
    entries = _parse_lines(text, source) + _parse_overrides(overrides)
    known = set(_SI_FIELDS) | set(UNIT_KEYS) | {"preset"}
    for e in entries:
        if e.key not in known and not e.key.startswith("isotope_"):
            raise ValidationError(f"{e.source}: unknown key", field=e.key, line=e.line)

    presets = [e for e in entries if e.key == "preset"]
    if presets:
        last = presets[-1]
        try:
            base = preset(last.value)
        except ValidationError as exc:
            msg = str(exc.args[0]).split("] ", 1)[-1]
            raise ValidationError(f"{last.source}: {msg}", field="preset", line=last.line) from None
        ctx = dataclasses.asdict(base)
    else:
        ctx = {"mu": 0.0, "U": 0.0, "T": 0.0, "M": 201, "J_tilde": None}
    origin = {}

    table = dict(ISOTOPES)
    for e in entries:
        if e.key.startswith("isotope_"):
            table[e.key[len("isotope_"):]] = _number(e)

    def put(field, value, e):
        ctx[field] = value
        origin[field] = e

    for e in entries:
        if e.key in ("m_a", "m_b"):
            put(e.key, _mass(e, table), e)
        elif e.key in ("lam", "lambda"):
            put("lam", _number(e), e)
        elif e.key == "lambda_nm":
            put("lam", _number(e) * 1e-9, e)

    missing = [f for f in ("m_a", "lam") if f not in ctx]
    for e in entries:
        if e.key in _STAGE_MASS or e.key in _STAGE_EP or e.key == "preset" or e.key.startswith("isotope_"):
            continue
        field = UNIT_KEYS.get(e.key, e.key)
        if e.key.endswith("_over_ER") or e.key.endswith("_over_ERlambda") or e.key == "sigma_over_a":
            if missing:
                raise ValidationError(f"{e.source}: needs m_a and lambda to be set", field=e.key, line=e.line)
            E_R = _E_R(ctx)
            x = _number(e)
            if e.key.endswith("_over_ERlambda"):
                x *= E_R * ctx["lam"]
            elif e.key == "sigma_over_a":
                x *= ctx["lam"] / 2
            else:
                x *= E_R
            put(field, x, e)
        elif e.key == "T_nK":
            put("T", _number(e) * 1e-9, e)
        elif e.key == "M":
            x = _number(e)
            if x != int(x):
                raise ValidationError(f"{e.source}: lattice size must be an integer", field="M", line=e.line)
            put("M", int(x), e)
        else:
            put(field, _number(e), e)

    for e in entries:
        if e.key in _STAGE_EP:
            need = [f for f in ("m_b", "g", "n0", "kappa") if f not in ctx]
            if need:
                raise ValidationError(f"{e.source}: needs {', '.join(need)} to be set", field=e.key, line=e.line)
            E_p = _closed_Ep(ctx)
            if e.key == "U_over_Ep":
                put("U", _number(e) * E_p, e)
            else:
                put("T", _number(e) * E_p / K_B, e)

    if "J" not in ctx and ctx.get("J_tilde") is not None:
        ctx["J"] = ctx["J_tilde"]  # placeholder, re-derived from J_tilde below
    absent = [f for f in _SI_FIELDS if f not in ctx]
    if absent:
        raise ValidationError(f"{source}: missing required parameters: {', '.join(absent)}", field=absent[0])
    try:
        params = SystemParams(**{f: ctx[f] for f in _SI_FIELDS})
    except ValidationError as exc:
        e = origin.get(exc.field)
        if e is None:
            raise
        msg = str(exc.args[0]).split("] ", 1)[-1]
        raise ValidationError(f"{e.source}: {msg}", field=e.key, line=e.line) from None
    if params.J_tilde is not None and "J" not in origin:
        params = repin_dressed_hopping(params)
    return params


def parse_config(path, overrides=()) -> SystemParams:
    """Read a ``key = value`` file and apply overrides after it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc.strerror}", field="config") from None
    return parse_config_text(text, overrides, source=str(path))


# -- CSV ------------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, numbers.Integral):
        return str(int(x))
    if isinstance(x, str):
        if any(c in x for c in ",\n\r\""):
            raise ValueError(f"string cell {x!r} needs quoting")
        return x
    x = float(x)
    if math.isnan(x):
        raise ValueError("NaN cannot be written")
    return "%.17g" % x


def emit_csv(columns, rows, path, meta=None, units=None):
    """Write a comma-separated table with ``#`` metadata lines before the header.

    ``rows`` is a sequence of equal-length records (or a 2D array).  Floats
    are written with 17 significant digits; NaN raises ValueError.
    """
    columns = list(columns)
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"# {key}: {value}")
    if units:
        lines.append("# units: " + "; ".join(f"{c}={units.get(c, '1')}" for c in columns))
    lines.append(",".join(columns))
    for r, row in enumerate(rows):
        row = list(row)
        if len(row) != len(columns):
            raise ValueError(f"row {r} has {len(row)} cells, header has {len(columns)}")
        try:
            lines.append(",".join(_fmt(x) for x in row))
        except ValueError as exc:
            raise ValueError(f"row {r}: {exc}") from None
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    """Return (meta dict, column names, float array of shape (rows, columns))."""
    meta, header, data = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(": ")
            meta[key] = value
        elif header is None:
            header = line.split(",")
        elif line:
            data.append([float(x) for x in line.split(",")])
    arr = np.array(data, dtype=float).reshape(len(data), len(header or []))
    return meta, header, arr


# -- manifests ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class RunManifest:
    """Everything needed to regenerate one CSV.

    ``hash`` covers the command, its options, the configuration text and
    the tool version; it is written into the CSV so the two can be matched.
    """

    command: str
    argv: list
    options: dict
    config_text: str
    overrides: list
    params_si: dict
    params_natural: dict
    derived_scales: dict
    validity: dict
    version: str = __version__
    wall_time_s: float = 0.0

    @property
    def hash(self):
        core = {"command": self.command, "options": self.options, "config_text": self.config_text,
                "overrides": self.overrides, "version": self.version}
        blob = json.dumps(_jsonable(core), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self):
        d = _jsonable(dataclasses.asdict(self))
        d["hash"] = self.hash
        return d

    def write(self, csv_path):
        path = manifest_path(csv_path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text())
        d.pop("hash", None)
        return cls(**d)


def manifest_path(csv_path):
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".manifest.json")


def build_manifest(command, argv, options, config_text, overrides, params: SystemParams) -> RunManifest:
    nat = to_natural(params)
    s = derive_scales(params)
    v = check_validity(params, warn=False)
    return RunManifest(
        command=command,
        argv=list(argv),
        options=_jsonable(options),
        config_text=config_text,
        overrides=list(overrides),
        params_si=_jsonable(dataclasses.asdict(params)),
        params_natural=_jsonable({k: getattr(nat, k) for k in
                                  ("E_R", "a", "mass_ratio", "J", "U", "mu", "kappa", "g", "n0", "sigma", "kT",
                                   "J_tilde", "xi", "E_p", "time_unit")}),
        derived_scales=_jsonable(dataclasses.asdict(s)),
        validity=_jsonable({"ratios": v.ratios, "threshold": v.threshold, "weak_coupling_ok": v.weak_coupling_ok,
                            "fast_phonon_ok": v.fast_phonon_ok, "strong_coupling_ok": v.strong_coupling_ok}),
    )
