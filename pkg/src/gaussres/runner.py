"""Run-file driven scans: parse a declarative input file, compute the
requested methods (gauss / ed / classical), and write CSV tables plus a JSON
manifest.  Also provides column-wise relative comparison of two result tables
and the bundled preset run files.

Run-file format (lines, '#' comments, [section] headers, key = value):

    method = all            # gauss | ed | classical | all
    dim = 1
    label = fig1
    symmetry = none         # none | reflection(sector=even|odd|both)
                            #      | permutation(N, d, statistics=boson|fermion)

    [potential]             # builtin = NAME [k=v ...]  or repeated term lines
    [mass]                  # diagonal = m1 [m2 ...]
    [grid]                  # mode = equidistant | explicit | uniform_random
    [integrator]            # tau0, tau_max, rel_tol, ...
    [temperatures]          # log_spaced = MIN MAX COUNT  or  list = v1 v2 ...
    [observables]           # observable = name : term[; term]   energy = true
    [ed]                    # box, points_per_dim, n_states, energy_cutoff
    [classical]             # box, quad_points, tolerance
    [density]               # kT, window, points        (1D only)
    [output]                # directory

Unknown sections or keys are rejected with the offending line number.
"""

import hashlib
import json
import math
import os
import platform
import re
import time
from dataclasses import dataclass, fields

import numpy as np
import scipy

from . import __version__
from . import ensemble as ens
from . import oracle
from . import symmetry as sym
from . import varprop as vp
from .errors import DiffToleranceError, ValidationError
from .potential import MassMatrix, Potential, builtin, parse_potential

_METHODS = ("gauss", "ed", "classical")

_TOP_KEYS = {"method", "dim", "label", "symmetry"}
_SECTION_KEYS = {
    "potential": {"builtin", "term"},
    "mass": {"diagonal"},
    "grid": {"mode", "box", "points_per_dim", "point", "count", "seed"},
    "integrator": {"tau0", "tau_max", "rel_tol", "abs_tol", "max_step",
                   "gram_regularization", "min_width"},
    "temperatures": {"log_spaced", "list"},
    "observables": {"observable", "energy"},
    "ed": {"box", "points_per_dim", "n_states", "energy_cutoff"},
    "classical": {"box", "quad_points", "tolerance"},
    "density": {"kT", "window", "points"},
    "output": {"directory"},
}
_REPEATABLE = {"term", "point", "observable"}

_LABEL_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.-]*")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_SECTION_RE = re.compile(r"\[([A-Za-z0-9_]+)\]")
_KEYVAL_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(\S.*?)\s*$")
_SYM_REFL_RE = re.compile(r"reflection\(\s*sector\s*=\s*(even|odd|both)\s*\)")
_SYM_PERM_RE = re.compile(
    r"permutation\(\s*(\d+)\s*,\s*(\d+)\s*,\s*statistics\s*=\s*(boson|fermion)\s*\)")

_RESERVED_COLUMNS = {"kT", "beta", "Z", "energy"}


def _fail(src, lineno, msg):
    raise ValidationError(f"{src}, line {lineno}: {msg}")


def _floats(src, lineno, value, n=None, what="value"):
    try:
        vals = [float(p) for p in value.split()]
    except ValueError:
        _fail(src, lineno, f"could not parse {what} {value!r} as numbers")
    if n is not None and len(vals) != n:
        _fail(src, lineno, f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def _one_float(src, lineno, value, what="value"):
    return _floats(src, lineno, value, n=1, what=what)[0]


def _ints(src, lineno, value, what="value"):
    vals = []
    for p in value.split():
        try:
            vals.append(int(p))
        except ValueError:
            _fail(src, lineno, f"could not parse {what} {value!r} as integers")
    return vals


def _one_int(src, lineno, value, what="value"):
    vals = _ints(src, lineno, value, what)
    if len(vals) != 1:
        _fail(src, lineno, f"{what} needs one integer")
    return vals[0]


def _one_bool(src, lineno, value, what="value"):
    if value == "true":
        return True
    if value == "false":
        return False
    _fail(src, lineno, f"{what} must be 'true' or 'false', got {value!r}")


def _box_pairs(src, lineno, value, dim):
    vals = _floats(src, lineno, value, n=2 * dim, what="box")
    pairs = tuple((vals[2 * i], vals[2 * i + 1]) for i in range(dim))
    for a, b in pairs:
        if not a < b:
            _fail(src, lineno, f"box interval ({a:g}, {b:g}) needs lower < upper")
    return pairs


def _per_dim_counts(src, lineno, value, dim, what="points_per_dim"):
    vals = _ints(src, lineno, value, what)
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim:
        _fail(src, lineno, f"{what} needs 1 or {dim} integers, got {len(vals)}")
    if any(v < 1 for v in vals):
        _fail(src, lineno, f"{what} entries must be >= 1")
    return tuple(vals)


def _tokenize(text, src):
    """Split into (top_items, sections) of (lineno, key, value) triples."""
    top = []
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.fullmatch(line)
        if m:
            name = m.group(1)
            if name not in _SECTION_KEYS:
                _fail(src, lineno, f"unknown section [{name}]")
            if name in sections:
                _fail(src, lineno, f"duplicate section [{name}]")
            sections[name] = []
            current = name
            continue
        m = _KEYVAL_RE.fullmatch(line)
        if m is None:
            _fail(src, lineno, f"expected 'key = value' or '[section]', got {line!r}")
        key, value = m.group(1), m.group(2)
        if current is None:
            if key not in _TOP_KEYS:
                _fail(src, lineno, f"unknown top-level key {key!r}")
            top.append((lineno, key, value))
        else:
            if key not in _SECTION_KEYS[current]:
                _fail(src, lineno, f"unknown key {key!r} in [{current}]")
            sections[current].append((lineno, key, value))
    return top, sections


def _collect(items, src):
    """Turn (lineno, key, value) triples into {key: (lineno, value)} with
    repeatable keys gathered into lists."""
    out = {}
    for lineno, key, value in items:
        if key in _REPEATABLE:
            out.setdefault(key, []).append((lineno, value))
        elif key in out:
            _fail(src, lineno, f"duplicate key {key!r}")
        else:
            out[key] = (lineno, value)
    return out


@dataclass
class RunConfig:
    """Fully validated run description with all defaults resolved."""

    methods: tuple
    dim: int
    label: str
    symmetry: dict | None
    potential: Potential
    mass: MassMatrix
    grid: object
    integrator: vp.IntegratorConfig
    tau_max: float
    temperatures: np.ndarray
    observables: list
    include_energy: bool
    ed: oracle.EDConfig | None
    classical: dict | None
    density: dict | None
    outdir: str | None
    resolved: dict


def parse_run_file(text, source="run file") -> RunConfig:
    """Parse and validate a run file; raises ValidationError with the line
    number on any problem."""
    src = source
    top, sections = _tokenize(text, src)
    topmap = _collect(top, src)
    resolved = {}

    # --- top level ---------------------------------------------------------
    if "method" not in topmap:
        _fail(src, 1, "missing required top-level key 'method'")
    lineno, value = topmap["method"]
    if value == "all":
        methods = _METHODS
    elif value in _METHODS:
        methods = (value,)
    else:
        _fail(src, lineno, f"method must be one of gauss|ed|classical|all, got {value!r}")
    resolved["method"] = value
    resolved["methods"] = list(methods)

    if "dim" not in topmap:
        _fail(src, 1, "missing required top-level key 'dim'")
    lineno, value = topmap["dim"]
    dim = _one_int(src, lineno, value, "dim")
    if dim < 1:
        _fail(src, lineno, "dim must be >= 1")
    resolved["dim"] = dim

    if "label" not in topmap:
        _fail(src, 1, "missing required top-level key 'label'")
    lineno, value = topmap["label"]
    if not _LABEL_RE.fullmatch(value):
        _fail(src, lineno, f"label {value!r} may use letters, digits, '_', '.', '-'")
    label = value
    resolved["label"] = label

    symmetry = None
    if "symmetry" in topmap:
        lineno, value = topmap["symmetry"]
        symmetry = _parse_symmetry(src, lineno, value, dim)
    resolved["symmetry"] = topmap.get("symmetry", (0, "none"))[1]

    # --- potential ---------------------------------------------------------
    if "potential" not in sections:
        _fail(src, 1, "missing required section [potential]")
    pot = _collect(sections["potential"], src)
    if ("builtin" in pot) == ("term" in pot):
        lineno = sections["potential"][0][0] if sections["potential"] else 1
        _fail(src, lineno, "[potential] needs either 'builtin' or 'term' lines, not both")
    if "builtin" in pot:
        lineno, value = pot["builtin"]
        U = _parse_builtin(src, lineno, value)
        resolved["potential"] = {"builtin": value}
    else:
        lines = pot["term"]
        text_terms = "\n".join(v for _, v in lines)
        try:
            U = parse_potential(text_terms, dim)
        except ValidationError as exc:
            _fail(src, lines[0][0], f"bad potential terms: {exc}")
        resolved["potential"] = {"terms": [v for _, v in lines]}
    if U.dim != dim:
        _fail(src, sections["potential"][0][0],
              f"potential dimension {U.dim} does not match dim = {dim}")

    # --- mass --------------------------------------------------------------
    diag = [1.0] * dim
    if "mass" in sections:
        massmap = _collect(sections["mass"], src)
        if "diagonal" not in massmap:
            _fail(src, sections["mass"][0][0] if sections["mass"] else 1,
                  "[mass] needs a 'diagonal' entry")
        lineno, value = massmap["diagonal"]
        vals = _floats(src, lineno, value, what="diagonal")
        if len(vals) == 1:
            vals = vals * dim
        if len(vals) != dim:
            _fail(src, lineno, f"diagonal needs 1 or {dim} masses")
        if any(v <= 0 for v in vals):
            _fail(src, lineno, "masses must be positive")
        diag = vals
    M = MassMatrix(np.diag(diag))
    resolved["mass"] = {"diagonal": diag}

    # --- grid --------------------------------------------------------------
    grid = None
    grid_resolved = None
    if "grid" in sections:
        grid, grid_resolved = _parse_grid(src, sections["grid"], dim)
    if "gauss" in methods and grid is None:
        _fail(src, 1, "method includes gauss but no [grid] section is present")
    resolved["grid"] = grid_resolved

    # --- integrator --------------------------------------------------------
    integ_kwargs = {}
    tau_max = None
    tau_max_line = 1
    if "integrator" in sections:
        imap = _collect(sections["integrator"], src)
        for key, (lineno, value) in imap.items():
            if key == "tau_max":
                tau_max = _one_float(src, lineno, value, "tau_max")
                tau_max_line = lineno
                if not (tau_max > 0 and math.isfinite(tau_max)):
                    _fail(src, lineno, "tau_max must be positive and finite")
            else:
                integ_kwargs[key] = _one_float(src, lineno, value, key)
    try:
        integrator = vp.IntegratorConfig(**integ_kwargs)
    except ValidationError as exc:
        _fail(src, sections["integrator"][0][0], str(exc))
    if "gauss" in methods and tau_max is None:
        _fail(src, 1, "method includes gauss but [integrator] sets no tau_max")
    resolved["integrator"] = {f.name: getattr(integrator, f.name)
                              for f in fields(integrator)}
    resolved["integrator"]["tau_max"] = tau_max

    # --- temperatures ------------------------------------------------------
    if "temperatures" not in sections:
        _fail(src, 1, "missing required section [temperatures]")
    tmap = _collect(sections["temperatures"], src)
    if ("log_spaced" in tmap) == ("list" in tmap):
        lineno = sections["temperatures"][0][0] if sections["temperatures"] else 1
        _fail(src, lineno, "[temperatures] needs exactly one of 'log_spaced' or 'list'")
    if "log_spaced" in tmap:
        lineno, value = tmap["log_spaced"]
        vals = _floats(src, lineno, value, n=3, what="log_spaced")
        lo, hi, count = vals[0], vals[1], int(round(vals[2]))
        if not (0 < lo < hi):
            _fail(src, lineno, "log_spaced needs 0 < MIN < MAX")
        if count < 2 or abs(count - vals[2]) > 0:
            _fail(src, lineno, "log_spaced COUNT must be an integer >= 2")
        temperatures = np.geomspace(hi, lo, count)
        resolved["temperatures"] = {"log_spaced": [lo, hi, count]}
    else:
        lineno, value = tmap["list"]
        vals = _floats(src, lineno, value, what="temperature list")
        if not vals:
            _fail(src, lineno, "temperature list is empty")
        if any(v <= 0 for v in vals):
            _fail(src, lineno, "temperatures must be positive")
        ordered = sorted(vals, reverse=True)
        if len(set(ordered)) != len(ordered):
            _fail(src, lineno, "temperature list has duplicates")
        temperatures = np.asarray(ordered)
        resolved["temperatures"] = {"list": ordered}

    # --- observables -------------------------------------------------------
    observables = []
    observable_texts = {}
    include_energy = False
    if "observables" in sections:
        omap = _collect(sections["observables"], src)
        for lineno, value in omap.get("observable", []):
            name, A = _parse_observable(src, lineno, value, dim)
            if name in observable_texts:
                _fail(src, lineno, f"duplicate observable name {name!r}")
            observables.append((name, A))
            observable_texts[name] = value.split(":", 1)[1].strip()
        if "energy" in omap:
            lineno, value = omap["energy"]
            include_energy = _one_bool(src, lineno, value, "energy")
    resolved["observables"] = observable_texts
    resolved["energy"] = include_energy

    # --- ed ----------------------------------------------------------------
    edcfg = None
    if "ed" in sections:
        edcfg, ed_resolved = _parse_ed(src, sections["ed"], dim)
        resolved["ed"] = ed_resolved
    if "ed" in methods and edcfg is None:
        _fail(src, 1, "method includes ed but no [ed] section is present")
    if "ed" in methods and symmetry is not None:
        _check_ed_symmetry(src, topmap["symmetry"][0], symmetry)

    # --- classical ---------------------------------------------------------
    classical = None
    if "classical" in sections:
        cmap = _collect(sections["classical"], src)
        box = None
        if "box" in cmap:
            lineno, value = cmap["box"]
            box = _box_pairs(src, lineno, value, dim)
        elif edcfg is not None:
            box = edcfg.box
        elif "classical" in methods:
            _fail(src, sections["classical"][0][0] if sections["classical"] else 1,
                  "[classical] needs a box (no [ed] box to borrow)")
        quad_points = 200
        if "quad_points" in cmap:
            lineno, value = cmap["quad_points"]
            quad_points = _one_int(src, lineno, value, "quad_points")
            if quad_points < 8:
                _fail(src, lineno, "quad_points must be >= 8")
        epsrel = None
        if "tolerance" in cmap:
            lineno, value = cmap["tolerance"]
            epsrel = _one_float(src, lineno, value, "tolerance")
            if not (0 < epsrel < 1e-2):
                _fail(src, lineno, "tolerance must be in (0, 1e-2)")
        classical = {"box": box, "quad_points": quad_points, "epsrel": epsrel}
        resolved["classical"] = {"box": [list(p) for p in box] if box else None,
                                 "quad_points": quad_points, "tolerance": epsrel}
    if "classical" in methods and classical is None:
        _fail(src, 1, "method includes classical but no [classical] section is present")

    # --- density -----------------------------------------------------------
    density = None
    if "density" in sections:
        dmap = _collect(sections["density"], src)
        first_line = sections["density"][0][0] if sections["density"] else 1
        if dim != 1:
            _fail(src, first_line, "[density] profiles are only produced for dim = 1")
        if "kT" not in dmap:
            _fail(src, first_line, "[density] needs a kT entry")
        lineno, value = dmap["kT"]
        kt = _one_float(src, lineno, value, "kT")
        match = np.isclose(temperatures, kt, rtol=1e-12, atol=0.0)
        if not match.any():
            _fail(src, lineno, f"density kT = {kt:g} is not in the temperature list")
        kt = float(temperatures[match][0])
        if "window" not in dmap:
            _fail(src, first_line, "[density] needs a window entry")
        lineno, value = dmap["window"]
        win = _floats(src, lineno, value, n=2, what="window")
        if not win[0] < win[1]:
            _fail(src, lineno, "window needs lower < upper")
        points = 201
        if "points" in dmap:
            lineno, value = dmap["points"]
            points = _one_int(src, lineno, value, "points")
            if points < 2:
                _fail(src, lineno, "density points must be >= 2")
        density = {"kT": kt, "window": tuple(win), "points": points}
        resolved["density"] = {"kT": kt, "window": win, "points": points}

    # --- output ------------------------------------------------------------
    outdir = None
    if "output" in sections:
        omap = _collect(sections["output"], src)
        if "directory" in omap:
            outdir = omap["directory"][1]
    resolved["output"] = {"directory": outdir}

    # --- cross checks ------------------------------------------------------
    if "gauss" in methods:
        max_tau = 0.5 / float(np.min(temperatures))
        if tau_max < max_tau * (1 - 1e-12):
            _fail(src, tau_max_line,
                  f"tau_max = {tau_max:g} is below beta/2 = {max_tau:g} "
                  f"for the lowest temperature")

    return RunConfig(methods=methods, dim=dim, label=label, symmetry=symmetry,
                     potential=U, mass=M, grid=grid, integrator=integrator,
                     tau_max=tau_max, temperatures=temperatures,
                     observables=observables, include_energy=include_energy,
                     ed=edcfg, classical=classical, density=density,
                     outdir=outdir, resolved=resolved)


def _parse_symmetry(src, lineno, value, dim):
    if value == "none":
        return None
    m = _SYM_REFL_RE.fullmatch(value)
    if m:
        return {"kind": "reflection", "sector": m.group(1)}
    m = _SYM_PERM_RE.fullmatch(value)
    if m:
        n, d, stats = int(m.group(1)), int(m.group(2)), m.group(3)
        if n * d != dim:
            _fail(src, lineno,
                  f"permutation({n}, {d}, ...) needs dim = N*d = {n * d}, got dim = {dim}")
        return {"kind": "permutation", "n": n, "d": d, "statistics": stats}
    _fail(src, lineno,
          "symmetry must be none, reflection(sector=even|odd|both), or "
          "permutation(N, d, statistics=boson|fermion)")


def _parse_builtin(src, lineno, value):
    parts = value.split()
    name = parts[0]
    params = {}
    for part in parts[1:]:
        if "=" not in part:
            _fail(src, lineno, f"builtin parameter {part!r} must look like key=value")
        k, v = part.split("=", 1)
        try:
            params[k] = float(v)
        except ValueError:
            _fail(src, lineno, f"builtin parameter {part!r} has a non-numeric value")
    if "dim" in params:
        params["dim"] = int(params["dim"])
    try:
        return builtin(name, **params)
    except ValidationError as exc:
        _fail(src, lineno, str(exc))


def _parse_grid(src, items, dim):
    gmap = _collect(items, src)
    first_line = items[0][0] if items else 1
    mode = "equidistant"
    if "mode" in gmap:
        lineno, value = gmap["mode"]
        if value not in ("equidistant", "explicit", "uniform_random"):
            _fail(src, lineno, f"unknown grid mode {value!r}")
        mode = value
    allowed = {"equidistant": {"mode", "box", "points_per_dim"},
               "explicit": {"mode", "point"},
               "uniform_random": {"mode", "box", "count", "seed"}}[mode]
    for lineno, key, _ in items:
        if key not in allowed:
            _fail(src, lineno, f"key {key!r} is not allowed for grid mode {mode!r}")
    if mode == "equidistant":
        if "box" not in gmap or "points_per_dim" not in gmap:
            _fail(src, first_line, "equidistant grid needs 'box' and 'points_per_dim'")
        lineno, value = gmap["box"]
        bounds = _box_pairs(src, lineno, value, dim)
        lineno, value = gmap["points_per_dim"]
        counts = _per_dim_counts(src, lineno, value, dim)
        spec = ens.GridSpec.equidistant(bounds, counts)
        return spec, {"mode": mode, "box": [list(p) for p in bounds],
                      "points_per_dim": list(counts)}
    if mode == "explicit":
        if "point" not in gmap:
            _fail(src, first_line, "explicit grid needs 'point' lines")
        pts, wts = [], []
        for lineno, value in gmap["point"]:
            vals = _floats(src, lineno, value, n=dim + 1, what="point")
            if vals[-1] <= 0:
                _fail(src, lineno, "point weight must be positive")
            pts.append(vals[:dim])
            wts.append(vals[-1])
        spec = ens.GridSpec.explicit(pts, wts)
        return spec, {"mode": mode,
                      "points": [p + [w] for p, w in zip(pts, wts)]}
    # uniform_random
    if "box" not in gmap or "count" not in gmap:
        _fail(src, first_line, "uniform_random grid needs 'box' and 'count'")
    lineno, value = gmap["box"]
    bounds = _box_pairs(src, lineno, value, dim)
    lineno, value = gmap["count"]
    count = _one_int(src, lineno, value, "count")
    if count < 1:
        _fail(src, lineno, "count must be >= 1")
    seed = 0
    if "seed" in gmap:
        lineno, value = gmap["seed"]
        seed = _one_int(src, lineno, value, "seed")
    spec = ens.GridSpec.uniform_random(count, bounds, seed=seed)
    return spec, {"mode": mode, "box": [list(p) for p in bounds],
                  "count": count, "seed": seed}


def _parse_observable(src, lineno, value, dim):
    if ":" not in value:
        _fail(src, lineno, "observable must look like 'name : term[; term]'")
    name, body = value.split(":", 1)
    name = name.strip()
    if not _NAME_RE.fullmatch(name):
        _fail(src, lineno, f"bad observable name {name!r}")
    if name in _RESERVED_COLUMNS or name.startswith("var_"):
        _fail(src, lineno, f"observable name {name!r} collides with a reserved column")
    try:
        A = parse_potential(body.replace(";", "\n"), dim)
    except ValidationError as exc:
        _fail(src, lineno, f"bad observable expression: {exc}")
    return name, A


def _parse_ed(src, items, dim):
    emap = _collect(items, src)
    first_line = items[0][0] if items else 1
    if "box" not in emap or "points_per_dim" not in emap:
        _fail(src, first_line, "[ed] needs 'box' and 'points_per_dim'")
    lineno, value = emap["box"]
    box = _box_pairs(src, lineno, value, dim)
    lineno, value = emap["points_per_dim"]
    counts = _per_dim_counts(src, lineno, value, dim)
    n_states = None
    if "n_states" in emap:
        lineno, value = emap["n_states"]
        n_states = _one_int(src, lineno, value, "n_states")
        if n_states < 1:
            _fail(src, lineno, "n_states must be >= 1")
    cutoff = None
    if "energy_cutoff" in emap:
        lineno, value = emap["energy_cutoff"]
        cutoff = _one_float(src, lineno, value, "energy_cutoff")
    try:
        cfg = oracle.EDConfig.make(box, counts, n_states=n_states,
                                   energy_cutoff=cutoff)
    except ValidationError as exc:
        _fail(src, first_line, str(exc))
    res = {"box": [list(p) for p in box], "points_per_dim": list(counts),
           "n_states": n_states, "energy_cutoff": cutoff}
    return cfg, res


def _check_ed_symmetry(src, lineno, symmetry):
    """The ed method tabulates either the full trace or the 2-particle
    exchange sectors; reject symmetrized runs it cannot mirror."""
    if symmetry["kind"] == "reflection":
        if symmetry["sector"] != "both":
            _fail(src, lineno,
                  "the ed method tabulates the full trace; with reflection "
                  "symmetry use sector=both (or drop the ed method)")
    else:
        if not (symmetry["n"] == 2 and symmetry["d"] == 1):
            _fail(src, lineno,
                  "the ed method supports permutation symmetry only for "
                  "permutation(2, 1, ...)")


# --- execution --------------------------------------------------------------

@dataclass
class RunResult:
    """Paths and manifest for one completed run."""

    label: str
    outdir: str
    outputs: list
    manifest: dict


def _build_adapters(cfg):
    M, U = cfg.mass, cfg.potential
    s = cfg.symmetry
    if s["kind"] == "reflection":
        sectors = ["even", "odd"] if s["sector"] == "both" else [s["sector"]]
        return [sym.reflection_adapter(M, U, sector) for sector in sectors]
    return [sym.permutation_adapter(M, U, s["n"], s["d"],
                                    statistics=s["statistics"])]


def _gauss_outputs(cfg, taus, workers):
    """Propagate and assemble the Gaussian-resolution scan (plus density)."""
    temps = cfg.temperatures
    events = {"regularization_events": 0, "dropped_members": 0,
              "failed_members": 0}
    if cfg.symmetry is None:
        e = ens.propagate_ensemble(cfg.grid, cfg.mass, cfg.potential,
                                   cfg.tau_max, taus, config=cfg.integrator,
                                   n_workers=workers)
        scan = ens.thermal_scan(e, temps, cfg.observables,
                                include_energy=cfg.include_energy)
        events["regularization_events"] = sum(
            m.trajectory.diagnostics.n_reg_events for m in e)
        events["failed_members"] = len(e.failures)
        density = None
        if cfg.density is not None:
            beta = 1.0 / cfg.density["kT"]
            density = lambda xs: ens.density_profile(e, beta, xs)
        return scan, density, events
    adapters = _build_adapters(cfg)
    se = sym.propagate_sym(cfg.grid, cfg.mass, cfg.potential, adapters,
                           cfg.tau_max, taus, config=cfg.integrator,
                           n_workers=workers)
    scan = sym.sym_thermal_scan(se, temps, cfg.observables,
                                include_energy=cfg.include_energy)
    for run_ in se.runs.values():
        events["regularization_events"] += sum(
            m.trajectory.diagnostics.n_reg_events for m in run_.members)
        events["dropped_members"] += len(run_.dropped)
        events["failed_members"] += len(run_.failures)
    density = None
    if cfg.density is not None:
        beta = 1.0 / cfg.density["kT"]
        density = lambda xs: sym.sym_density_profile(se, beta, xs)
    return scan, density, events


def _ed_outputs(cfg):
    symmetrize = None
    if cfg.symmetry is not None and cfg.symmetry["kind"] == "permutation":
        symmetrize = cfg.symmetry["statistics"]
    spectral = oracle.ed_solve(cfg.potential, cfg.mass, cfg.ed,
                               symmetrize=symmetrize)
    scan = oracle.ed_thermal_scan(spectral, cfg.temperatures, cfg.observables,
                                  include_energy=cfg.include_energy)
    density = None
    if cfg.density is not None:
        beta = 1.0 / cfg.density["kT"]
        _, _, rho = oracle.ed_thermal(spectral, beta)
        axis = spectral.axes[0]
        lo, hi = cfg.density["window"]
        keep = (axis >= lo) & (axis <= hi)
        density = (axis[keep], rho[keep])
    return scan, density


def _classical_scan(cfg):
    c = cfg.classical
    return oracle.classical_thermal_scan(cfg.potential, cfg.mass,
                                         cfg.temperatures, cfg.observables,
                                         box=c["box"],
                                         include_energy=cfg.include_energy,
                                         quad_points=c["quad_points"],
                                         epsrel=c["epsrel"])


def _sha256(text):
    return hashlib.sha256(text.encode()).hexdigest()


def run(path, outdir=None, n_workers=None) -> RunResult:
    """Execute a run file: validate fully, compute every requested method,
    then write all outputs at once (CSV tables, optional density profiles,
    and a JSON manifest, written last)."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read run file: {exc}") from None
    cfg = parse_run_file(text, source=os.path.basename(path))

    outdir = outdir or cfg.outdir or "."
    workers = ens.resolve_workers(n_workers)
    taus = ens.checkpoint_taus(cfg.temperatures)

    scans = {}
    densities = {}
    timings = {}
    events = {"regularization_events": 0, "dropped_members": 0,
              "failed_members": 0}

    if "gauss" in cfg.methods:
        t0 = time.perf_counter()
        scan, density_fn, ev = _gauss_outputs(cfg, taus, workers)
        scans["gauss"] = scan
        for k in events:
            events[k] += ev[k]
        if density_fn is not None:
            densities["gauss"] = density_fn  # resolved after the x-grid is fixed
        timings["gauss"] = time.perf_counter() - t0

    if "ed" in cfg.methods:
        t0 = time.perf_counter()
        scan, density = _ed_outputs(cfg)
        scans["ed"] = scan
        if density is not None:
            densities["ed"] = density
        timings["ed"] = time.perf_counter() - t0

    if "classical" in cfg.methods:
        t0 = time.perf_counter()
        scans["classical"] = _classical_scan(cfg)
        timings["classical"] = time.perf_counter() - t0

    # Share one x-grid between density profiles: the ED grid nodes inside the
    # window when available, otherwise a uniform grid.
    if "gauss" in densities:
        if "ed" in densities:
            xs = densities["ed"][0]
        else:
            lo, hi = cfg.density["window"]
            xs = np.linspace(lo, hi, cfg.density["points"])
        t0 = time.perf_counter()
        densities["gauss"] = (xs, densities["gauss"](xs))
        timings["gauss"] += time.perf_counter() - t0

    os.makedirs(outdir, exist_ok=True)
    outputs = []
    hashes = {}
    for method in cfg.methods:
        name = f"{cfg.label}_{method}.csv"
        csv_text = scans[method].to_csv()
        ens.write_atomic(os.path.join(outdir, name), csv_text)
        outputs.append(name)
        hashes[name] = _sha256(csv_text)
        if method in densities:
            dname = f"{cfg.label}_{method}_density.csv"
            dtext = ens.density_csv(*densities[method])
            ens.write_atomic(os.path.join(outdir, dname), dtext)
            outputs.append(dname)
            hashes[dname] = _sha256(dtext)

    manifest = {
        "label": cfg.label,
        "input_sha256": _sha256(text),
        "config": cfg.resolved,
        "versions": {"python": platform.python_version(),
                     "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "gaussres": __version__},
        "workers": workers,
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
        "events": events,
        "outputs": hashes,
    }
    mname = f"{cfg.label}_manifest.json"
    ens.write_atomic(os.path.join(outdir, mname),
                     json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    outputs.append(mname)
    return RunResult(cfg.label, outdir, outputs, manifest)


# --- diff -------------------------------------------------------------------

@dataclass
class DiffReport:
    """Per-column maximum relative deviation between two scan tables."""

    columns: dict
    tolerance: float
    passed: bool
    rows_compared: int

    def lines(self):
        out = []
        for name, dev in self.columns.items():
            mark = "ok" if dev <= self.tolerance else "FAIL"
            out.append(f"{name}: max rel dev {dev:.3e}  [{mark}]")
        out.append(f"{'PASS' if self.passed else 'FAIL'}: {self.rows_compared} rows, "
                   f"tolerance {self.tolerance:g}")
        return out


def _read_scan_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise ValidationError(f"{path}: empty file")
        names = header.split(",")
        rows = []
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise ValidationError(
                    f"{path}, line {lineno}: expected {len(names)} fields, "
                    f"got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValidationError(
                    f"{path}, line {lineno}: non-numeric field") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return names, np.asarray(rows)


def diff(path_a, path_b, rel_tol, columns=None, kt_min=None, kt_max=None,
         strict=False) -> DiffReport:
    """Compare two scan tables column by column.

    Both files must share the identical header and kT column.  The deviation
    per column is max over rows of |a-b| / max(|a|, |b|); rows may be
    restricted to a kT range.  With strict=True a failing comparison raises
    DiffToleranceError.
    """
    rel_tol = float(rel_tol)
    if not (rel_tol > 0):
        raise ValidationError("diff tolerance must be positive")
    try:
        names_a, data_a = _read_scan_csv(path_a)
        names_b, data_b = _read_scan_csv(path_b)
    except OSError as exc:
        raise ValidationError(f"cannot read table: {exc}") from None
    if names_a != names_b:
        raise ValidationError(
            f"column mismatch: {path_a} has {names_a}, {path_b} has {names_b}")
    if "kT" not in names_a:
        raise ValidationError("tables have no kT column")
    if data_a.shape[0] != data_b.shape[0]:
        raise ValidationError(
            f"row count mismatch: {data_a.shape[0]} vs {data_b.shape[0]}")
    ik = names_a.index("kT")
    kts = data_a[:, ik]
    if not np.allclose(kts, data_b[:, ik], rtol=1e-12, atol=0.0):
        raise ValidationError("kT columns differ; the tables cover different scans")

    mask = np.ones(len(kts), dtype=bool)
    if kt_min is not None:
        mask &= kts >= float(kt_min) * (1 - 1e-12)
    if kt_max is not None:
        mask &= kts <= float(kt_max) * (1 + 1e-12)
    if not mask.any():
        raise ValidationError("no rows left after the kT range restriction")

    skip = {"kT", "beta"}
    if columns:
        unknown = [c for c in columns if c not in names_a]
        if unknown:
            raise ValidationError(f"unknown columns requested: {unknown}")
        checked = [c for c in columns if c not in skip]
    else:
        checked = [n for n in names_a if n not in skip]

    devs = {}
    for name in checked:
        j = names_a.index(name)
        a = data_a[mask, j]
        b = data_b[mask, j]
        scale = np.maximum(np.abs(a), np.abs(b))
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(scale > 0, np.abs(a - b) / scale, 0.0)
        devs[name] = float(np.max(rel))

    passed = all(d <= rel_tol for d in devs.values())
    report = DiffReport(devs, rel_tol, passed, int(mask.sum()))
    if strict and not passed:
        bad = {k: v for k, v in devs.items() if v > rel_tol}
        raise DiffToleranceError(
            f"deviation above {rel_tol:g}: "
            + ", ".join(f"{k}={v:.3e}" for k, v in bad.items()))
    return report


# --- presets ----------------------------------------------------------------

_PRESET_FIG1 = """\
# 1D anharmonic single well scanned with all three methods.
method = all
dim = 1
label = fig1

[potential]
builtin = single_well_1d

[grid]
mode = equidistant
box = -5 5
points_per_dim = 10

[integrator]
tau0 = 0.01
tau_max = 50

[temperatures]
log_spaced = 0.1 10 40

[observables]
observable = x1 : 1 * x1^1
observable = x1sq : 1 * x1^2
energy = true

[ed]
box = -8 8
points_per_dim = 512

[classical]
box = -12 12
"""

_PRESET_FIG2 = """\
# 1D symmetric double well, parity-resolved propagation, full-trace totals.
method = all
dim = 1
label = fig2
symmetry = reflection(sector=both)

[potential]
builtin = double_well_1d

[grid]
mode = equidistant
box = -3 3
points_per_dim = 14

[integrator]
tau0 = 0.01
tau_max = 5
# the 5% accuracy target is grid-limited, not integrator-limited
rel_tol = 1e-6
abs_tol = 1e-8

[temperatures]
log_spaced = 0.1 10 40

[observables]
observable = x1 : 1 * x1^1
observable = x1sq : 1 * x1^2
energy = true

[ed]
box = -5 5
points_per_dim = 512

[classical]
box = -6 6
"""

_PRESET_FIG2_UNSYM = """\
# The double-well scan without symmetry projection, for comparison.
method = gauss
dim = 1
label = fig2_unsym

[potential]
builtin = double_well_1d

[grid]
mode = equidistant
box = -3 3
points_per_dim = 14

[integrator]
tau0 = 0.01
tau_max = 5
rel_tol = 1e-6
abs_tol = 1e-8

[temperatures]
log_spaced = 0.1 10 40

[observables]
observable = x1 : 1 * x1^1
observable = x1sq : 1 * x1^2
energy = true
"""

_PRESET_FIG3 = """\
# Double-well density profile at kT = 0.5, symmetry-projected vs exact.
method = all
dim = 1
label = fig3
symmetry = reflection(sector=both)

[potential]
builtin = double_well_1d

[grid]
mode = equidistant
box = -3 3
points_per_dim = 14

[integrator]
tau0 = 0.01
tau_max = 1.0
rel_tol = 1e-6
abs_tol = 1e-8

[temperatures]
list = 0.5

[observables]
observable = x1 : 1 * x1^1
observable = x1sq : 1 * x1^2
energy = true

[ed]
box = -5 5
points_per_dim = 512

[classical]
box = -6 6

[density]
kT = 0.5
window = -3.5 3.5
"""

_PRESET_FIG4 = """\
# 2D asymmetric double well on a 16 x 16 grid, all three methods.
method = all
dim = 2
label = fig4

[potential]
builtin = asym_double_well_2d

[grid]
mode = equidistant
box = -4 4 -4 4
points_per_dim = 16

[integrator]
tau0 = 0.01
tau_max = 2.5
# the 5% accuracy target leaves no reason to integrate to 1e-8
rel_tol = 1e-6
abs_tol = 1e-8

[temperatures]
log_spaced = 0.2 10 40

[observables]
observable = x1 : 1 * x1^1
observable = x1sq : 1 * x1^2
observable = x2 : 1 * x2^1
observable = x2sq : 1 * x2^2
energy = true

[ed]
box = -4.5 4.5 -7 7
points_per_dim = 48 64

[classical]
box = -4.3 4.3 -7 7
tolerance = 1e-6
"""


def presets() -> dict:
    """The bundled run files, keyed by name."""
    return {"fig1": _PRESET_FIG1, "fig2": _PRESET_FIG2,
            "fig2_unsym": _PRESET_FIG2_UNSYM, "fig3": _PRESET_FIG3,
            "fig4": _PRESET_FIG4}


def write_preset(name, directory=".") -> str:
    """Write the named preset run file into directory; returns its path."""
    table = presets()
    if name not in table:
        raise ValidationError(
            f"unknown preset {name!r}; available: {', '.join(sorted(table))}")
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{name}.run")
    ens.write_atomic(path, table[name])
    return path
