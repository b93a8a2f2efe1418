"""Polynomial-times-Gaussian potentials, mass matrices, and the builtin catalog.

A potential is a sum of terms of the form

    coeff * p(x) * exp(-1/2 (x - s)^T A (x - s))

with p a sparse multivariate polynomial (multi-index -> coefficient, in
absolute coordinates), s a center vector, and A a symmetric positive
semidefinite width matrix.  A = 0 gives a plain polynomial term, which is
what all the builtin benchmark potentials use.

The text grammar used by run files lives here too: one term per line,
``coeff * x1^a1 * ... [* gauss(center; row1; ...; rowD)]``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ValidationError

MultiIndex = tuple[int, ...]


def _as_vector(x, dim: int, what: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.shape != (dim,):
        raise ValidationError(f"{what}: expected shape ({dim},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{what}: non-finite entries")
    return v


def _as_matrix(a, dim: int, what: str) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(dim)
    if m.shape != (dim, dim):
        raise ValidationError(f"{what}: expected shape ({dim},{dim}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{what}: non-finite entries")
    return m


@dataclass(frozen=True)
class PolyGaussTerm:
    """One term coeff * p(x) * exp(-1/2 (x-center)^T width (x-center))."""

    coeff: float
    poly: dict[MultiIndex, float]
    center: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        dim = center.shape[0]
        width = _as_matrix(self.width, dim, "width")
        if not np.array_equal(width, width.T):
            raise ValidationError("width matrix must be exactly symmetric")
        eigs = np.linalg.eigvalsh(width)
        scale = float(np.max(np.abs(eigs))) if eigs.size else 0.0
        if eigs.size and eigs.min() < -1e-12 * max(scale, 1.0):
            raise ValidationError(f"width matrix not PSD (min eig {eigs.min():g})")
        poly = {}
        for alpha, c in dict(self.poly).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != dim or any(a < 0 for a in alpha):
                raise ValidationError(f"bad multi-index {alpha} for dimension {dim}")
            c = float(c)
            if c != 0.0:
                poly[alpha] = poly.get(alpha, 0.0) + c
        object.__setattr__(self, "coeff", float(self.coeff))
        object.__setattr__(self, "poly", poly)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "width", width)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def has_gauss(self) -> bool:
        return bool(np.any(self.width != 0.0))

    def __call__(self, x: np.ndarray) -> float:
        x = _as_vector(x, self.dim, "x")
        p = 0.0
        for alpha, c in self.poly.items():
            p += c * float(np.prod(x ** np.asarray(alpha)))
        val = self.coeff * p
        if self.has_gauss:
            d = x - self.center
            val *= np.exp(-0.5 * d @ self.width @ d)
        return float(val)


@dataclass(frozen=True)
class Potential:
    """Sum of PolyGaussTerm over a fixed dimension."""

    dim: int
    terms: tuple[PolyGaussTerm, ...] = field(default_factory=tuple)

    def __post_init__(self):
        dim = int(self.dim)
        if dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {dim}")
        terms = tuple(self.terms)
        for t in terms:
            if not isinstance(t, PolyGaussTerm):
                raise ValidationError("terms must be PolyGaussTerm instances")
            if t.dim != dim:
                raise ValidationError(
                    f"term dimension {t.dim} inconsistent with potential dimension {dim}")
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "terms", terms)

    def __call__(self, x) -> float:
        return evaluate(self, x)


def evaluate(potential: Potential, x) -> float:
    """U(x) as a plain float; x must be a length-D vector (scalar ok for D=1)."""
    x = _as_vector(x, potential.dim, "x")
    return float(sum(t(x) for t in potential.terms))


def evaluate_many(potential: Potential, xs: np.ndarray) -> np.ndarray:
    """Vectorized evaluation on an (N, D) array of points."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.shape[1] != potential.dim:
        raise ValidationError(
            f"points have dimension {xs.shape[1]}, potential has {potential.dim}")
    out = np.zeros(xs.shape[0])
    for t in potential.terms:
        p = np.zeros(xs.shape[0])
        for alpha, c in t.poly.items():
            p += c * np.prod(xs ** np.asarray(alpha), axis=1)
        val = t.coeff * p
        if t.has_gauss:
            d = xs - t.center
            val = val * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, t.width, d))
        out += val
    return out


class MassMatrix:
    """Symmetric positive-definite mass matrix with cached factorizations."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"mass matrix must be square, got shape {m.shape}")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-14 * max(1.0, np.abs(m).max())):
            raise ValidationError("mass matrix must be symmetric")
        m = 0.5 * (m + m.T)
        try:
            cho = cho_factor(m, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValidationError(f"mass matrix not positive definite: {exc}") from None
        self._m = m
        self._m.setflags(write=False)
        self._cho = cho
        self._inv = cho_solve(cho, np.eye(m.shape[0]))
        self._inv = 0.5 * (self._inv + self._inv.T)
        self._inv.setflags(write=False)
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))

    @classmethod
    def isotropic(cls, m: float, dim: int) -> "MassMatrix":
        if m <= 0:
            raise ValidationError(f"mass must be positive, got {m}")
        return cls(float(m) * np.eye(dim))

    @classmethod
    def diagonal(cls, masses) -> "MassMatrix":
        masses = np.atleast_1d(np.asarray(masses, dtype=float))
        return cls(np.diag(masses))

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def inverse(self) -> np.ndarray:
        return self._inv

    @property
    def logdet(self) -> float:
        return self._logdet

    @property
    def dim(self) -> int:
        return self._m.shape[0]

    def is_diagonal(self, tol: float = 0.0) -> bool:
        off = self._m - np.diag(np.diag(self._m))
        return bool(np.all(np.abs(off) <= tol * max(1.0, np.abs(self._m).max())))

    def __repr__(self):
        return f"MassMatrix({self._m.tolist()})"


def _poly_potential(dim: int, table: dict[MultiIndex, float]) -> Potential:
    term = PolyGaussTerm(1.0, table, np.zeros(dim), np.zeros((dim, dim)))
    return Potential(dim, (term,))


def builtin(name: str, **params) -> Potential:
    """Factory for the benchmark potentials.

    single_well_1d:      1/2 x^2 + 0.1 x^4
    double_well_1d:      4 - 4 x^2 + x^4
    asym_double_well_2d: (x^2-2)^2 + 0.1 x + 0.5 (y - 0.5 x)^2 + 0.1 y^4
    harmonic:            1/2 m w^2 |x|^2   (params omega, m, dim)
    """
    if name == "single_well_1d":
        _require_no_params(name, params)
        return _poly_potential(1, {(2,): 0.5, (4,): 0.1})
    if name == "double_well_1d":
        _require_no_params(name, params)
        return _poly_potential(1, {(0,): 4.0, (2,): -4.0, (4,): 1.0})
    if name == "asym_double_well_2d":
        _require_no_params(name, params)
        # (x^2-2)^2 + 0.1x + 0.5(y-x/2)^2 + 0.1y^4 expanded to monomials
        return _poly_potential(2, {
            (4, 0): 1.0,
            (2, 0): -4.0 + 0.125,
            (0, 0): 4.0,
            (1, 0): 0.1,
            (0, 2): 0.5,
            (1, 1): -0.5,
            (0, 4): 0.1,
        })
    if name == "harmonic":
        omega = float(params.pop("omega", 1.0))
        m = float(params.pop("m", 1.0))
        dim = int(params.pop("dim", 1))
        _require_no_params(name, params)
        if omega <= 0 or m <= 0 or dim < 1:
            raise ValidationError("harmonic requires omega > 0, m > 0, dim >= 1")
        k = 0.5 * m * omega * omega
        table = {}
        for i in range(dim):
            alpha = [0] * dim
            alpha[i] = 2
            table[tuple(alpha)] = k
        return _poly_potential(dim, table)
    raise ValidationError(
        f"unknown builtin potential {name!r}; "
        "choose from single_well_1d, double_well_1d, asym_double_well_2d, harmonic")


def _require_no_params(name, params):
    if params:
        raise ValidationError(f"unexpected parameters for builtin {name!r}: {sorted(params)}")


# --- text format ------------------------------------------------------------
#
# One term per line:  coeff * x1^a1 * ... * xD^aD [* gauss(center; row1; ...)]
# The leading coefficient may be omitted (default 1).  gauss fields are
# separated by ';': first the center, then the D rows of the width matrix,
# entries whitespace-separated.

_MONOMIAL_RE = re.compile(r"^x([1-9][0-9]*)(?:\^([0-9]+))?$")
_GAUSS_RE = re.compile(r"^gauss\((.*)\)$")


def _parse_float(tok: str, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ValidationError(f"{what}: cannot parse {tok!r} as a number") from None


def parse_term(line: str, dim: int) -> PolyGaussTerm:
    """Parse one term line of the potential grammar."""
    factors = [f.strip() for f in line.split("*")]
    if any(not f for f in factors):
        raise ValidationError(f"empty factor in term {line!r}")
    coeff = 1.0
    exponents = [0] * dim
    center = np.zeros(dim)
    width = np.zeros((dim, dim))
    seen_gauss = False
    for pos, tok in enumerate(factors):
        mono = _MONOMIAL_RE.match(tok)
        gauss = _GAUSS_RE.match(tok)
        if mono:
            var = int(mono.group(1))
            if var > dim:
                raise ValidationError(f"variable x{var} out of range for dimension {dim}")
            power = int(mono.group(2)) if mono.group(2) else 1
            exponents[var - 1] += power
        elif gauss:
            if seen_gauss:
                raise ValidationError(f"multiple gauss(...) factors in term {line!r}")
            if pos != len(factors) - 1:
                raise ValidationError("gauss(...) must be the last factor of a term")
            seen_gauss = True
            fields = [f.strip() for f in gauss.group(1).split(";")]
            if len(fields) != dim + 1:
                raise ValidationError(
                    f"gauss(...) needs a center and {dim} width rows, got {len(fields)} fields")
            cvals = fields[0].split()
            if len(cvals) != dim:
                raise ValidationError(f"gauss center needs {dim} entries, got {len(cvals)}")
            center = np.array([_parse_float(v, "gauss center") for v in cvals])
            rows = []
            for row in fields[1:]:
                rvals = row.split()
                if len(rvals) != dim:
                    raise ValidationError(f"gauss width row needs {dim} entries, got {len(rvals)}")
                rows.append([_parse_float(v, "gauss width") for v in rvals])
            width = np.array(rows)
            width = 0.5 * (width + width.T)
        elif pos == 0:
            coeff = _parse_float(tok, "term coefficient")
        else:
            raise ValidationError(f"cannot parse factor {tok!r} in term {line!r}")
    return PolyGaussTerm(coeff, {tuple(exponents): 1.0}, center, width)


def parse_potential(text: str, dim: int) -> Potential:
    """Parse a multi-line potential description (one term per line)."""
    terms = []
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            terms.append(parse_term(line, dim))
        except ValidationError as exc:
            raise ValidationError(f"potential line {i}: {exc}") from None
    if not terms:
        raise ValidationError("potential has no terms")
    return Potential(dim, tuple(terms))


def format_term(term: PolyGaussTerm) -> list[str]:
    """Format one term as grammar lines (one line per monomial)."""
    gauss_part = None
    if term.has_gauss:
        fields = [" ".join("%.17g" % v for v in term.center)]
        for row in term.width:
            fields.append(" ".join("%.17g" % v for v in row))
        gauss_part = "gauss(" + "; ".join(fields) + ")"
    lines = []
    for alpha in sorted(term.poly):
        parts = ["%.17g" % (term.coeff * term.poly[alpha])]
        for i, a in enumerate(alpha):
            if a == 1:
                parts.append(f"x{i + 1}")
            elif a > 1:
                parts.append(f"x{i + 1}^{a}")
        if gauss_part is not None:
            parts.append(gauss_part)
        lines.append(" * ".join(parts))
    return lines


def format_potential(potential: Potential) -> str:
    lines = []
    for t in potential.terms:
        lines.extend(format_term(t))
    return "\n".join(lines)
