"""Independent ground-truth engines at desk scale.

Exact diagonalization on a position grid (sinc-DVR kinetic stencil, 1D/2D),
classical Boltzmann quadrature, and closed-form harmonic-oscillator
thermodynamics.  Everything here is deliberately independent of the
variational-propagation code paths so the two can be compared end to end.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.linalg import eigh
from scipy.special import logsumexp

from .ensemble import ThermalScan, _variance_pairs, monomial_of
from .errors import NumericalError, ValidationError
from .potential import MassMatrix, Potential, evaluate_many

_TRUNCATION_TOL = 1e-10
_RESIDUAL_TOL = 1e-8
_ORTHO_TOL = 1e-10
_TAIL_TOL = 1e-10
_CHECK_CAP = 512


@dataclass(frozen=True)
class EDConfig:
    """Grid exact-diagonalization setup: per-dimension box and point count,
    optional spectrum truncation by count or energy."""

    box: tuple
    points: tuple
    n_states: int = None
    energy_cutoff: float = None

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        object.__setattr__(self, "box", box)
        pts = tuple(int(n) for n in self.points)
        object.__setattr__(self, "points", pts)
        if len(box) != len(pts):
            raise ValidationError("box and points must have one entry per dimension")
        if not 1 <= len(box) <= 2:
            raise ValidationError("exact diagonalization supports 1 or 2 dimensions")
        for (a, b), n in zip(box, pts):
            if not (b > a):
                raise ValidationError(f"empty box [{a}, {b}]")
            if n < 8:
                raise ValidationError("need at least 8 grid points per dimension")
        if self.n_states is not None and self.n_states < 1:
            raise ValidationError("n_states must be positive")

    @classmethod
    def make(cls, box, points, n_states=None, energy_cutoff=None):
        """Accept scalars for 1D: make((a, b), n)."""
        box = tuple(box)
        if len(box) == 2 and np.isscalar(box[0]):
            box = (box,)
        if np.isscalar(points):
            points = (points,) * len(box)
        return cls(box, tuple(points), n_states, energy_cutoff)


@dataclass
class SpectralData:
    """Retained eigenpairs on the grid.

    coeffs columns are orthonormal under the plain dot product; the grid
    wavefunction is psi_n(x_i) = coeffs[i, n] / sqrt(cell).
    """

    energies: np.ndarray
    coeffs: np.ndarray
    axes: tuple
    cell: float
    dim: int

    @property
    def n_states(self) -> int:
        return self.energies.size

    @property
    def points(self) -> np.ndarray:
        if self.dim == 1:
            return self.axes[0][:, None]
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _dvr_axis(a: float, b: float, n: int):
    delta = (b - a) / n
    return a + delta * (np.arange(n) + 0.5), delta


def _kinetic_1d(n: int, delta: float, mass: float) -> np.ndarray:
    """Sinc-DVR second-derivative stencil: spectrally accurate on a uniform
    grid, -(1/2m) d^2/dx^2."""
    i = np.arange(n)
    diff = i[:, None] - i[None, :]
    with np.errstate(divide="ignore"):
        K = 2.0 / np.where(diff == 0, 1, diff) ** 2
    np.fill_diagonal(K, math.pi ** 2 / 3.0)
    K *= np.where((diff % 2) == 0, 1.0, -1.0) / (2.0 * mass * delta ** 2)
    return K


def _diagonal_masses(M: MassMatrix) -> np.ndarray:
    m = M.matrix
    if np.any(m != np.diag(np.diag(m))):
        raise ValidationError("grid diagonalization needs a diagonal mass matrix")
    return np.diag(m).copy()


def _pair_basis(n: int, statistics: str) -> np.ndarray:
    """Orthonormal (anti)symmetrized basis on an n x n product grid:
    (e_ij +/- e_ji)/sqrt(2) for i<j, plus e_ii for bosons."""
    cols = []
    s = 1.0 if statistics == "boson" else -1.0
    r = 1.0 / math.sqrt(2.0)
    for i in range(n):
        if statistics == "boson":
            e = np.zeros(n * n)
            e[i * n + i] = 1.0
            cols.append(e)
        for j in range(i + 1, n):
            e = np.zeros(n * n)
            e[i * n + j] = r
            e[j * n + i] = s * r
            cols.append(e)
    return np.array(cols).T


def ed_solve(U: Potential, M: MassMatrix, config: EDConfig,
             symmetrize: str = None) -> SpectralData:
    """Diagonalize T + U on the DVR grid.

    symmetrize in {None, 'boson', 'fermion'} restricts a two-particle 1D
    problem (dim 2, equal axes and masses, exchange-symmetric potential) to
    the corresponding sector before diagonalizing.
    """
    dim = len(config.box)
    if U.dim != dim or M.dim != dim:
        raise ValidationError("potential/mass dimension does not match the ED box")
    masses = _diagonal_masses(M)
    axes = []
    deltas = []
    for (a, b), n in zip(config.box, config.points):
        x, d = _dvr_axis(a, b, n)
        axes.append(x)
        deltas.append(d)
    if dim == 1:
        pts = axes[0][:, None]
        cell = deltas[0]
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        cell = deltas[0] * deltas[1]
    uvals = evaluate_many(U, pts)
    if not np.all(np.isfinite(uvals)):
        raise ValidationError("potential is not finite on the ED grid")

    if dim == 1:
        H = _kinetic_1d(config.points[0], deltas[0], masses[0])
        H[np.diag_indices_from(H)] += uvals
    else:
        K1 = _kinetic_1d(config.points[0], deltas[0], masses[0])
        K2 = _kinetic_1d(config.points[1], deltas[1], masses[1])
        n1, n2 = config.points
        H = np.kron(K1, np.eye(n2)) + np.kron(np.eye(n1), K2)
        H[np.diag_indices_from(H)] += uvals

    if symmetrize is not None:
        if symmetrize not in ("boson", "fermion"):
            raise ValidationError(f"symmetrize must be 'boson' or 'fermion', got {symmetrize!r}")
        if dim != 2 or config.box[0] != config.box[1] \
                or config.points[0] != config.points[1] or masses[0] != masses[1]:
            raise ValidationError("sector diagonalization needs two identical 1D particles")
        uswap = uvals.reshape(config.points).T.ravel()
        if np.max(np.abs(uswap - uvals)) > 1e-12 * (1.0 + np.max(np.abs(uvals))):
            raise ValidationError("potential is not exchange symmetric")
        B = _pair_basis(config.points[0], symmetrize)
        HB = H @ B
        # divide-and-conquer driver: the default dsyevr loosens orthonormality
        # to ~1e-10 across clustered eigenvalue groups at the top of the
        # spectrum, which trips the guard below
        energies, vecs = eigh(B.T @ HB, driver="evd")
        coeffs = B @ vecs
    else:
        energies, coeffs = eigh(H, driver="evd")

    if config.energy_cutoff is not None:
        keep = int(np.searchsorted(energies, config.energy_cutoff, side="right"))
        if keep == 0:
            raise ValidationError("energy cutoff excludes the whole spectrum")
        energies, coeffs = energies[:keep], coeffs[:, :keep]
    if config.n_states is not None:
        energies, coeffs = energies[:config.n_states], coeffs[:, :config.n_states]

    ncheck = min(energies.size, _CHECK_CAP)
    C = coeffs[:, :ncheck]
    resid = H @ C - C * energies[:ncheck]
    rnorm = np.linalg.norm(resid, axis=0)
    bad = rnorm > _RESIDUAL_TOL * np.abs(energies[:ncheck])
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise NumericalError(
            f"eigenpair {k} residual {rnorm[k]:.3e} exceeds "
            f"{_RESIDUAL_TOL:g}*|E|; refine the grid or box")
    ortho = C.T @ C - np.eye(ncheck)
    if np.max(np.abs(ortho)) > _ORTHO_TOL:
        raise NumericalError("eigenvectors lost orthonormality; refine the grid")
    return SpectralData(energies, coeffs, tuple(axes), cell, dim)


def _boltzmann_probs(spectral: SpectralData, beta: float):
    logw = -float(beta) * spectral.energies
    logz = float(logsumexp(logw))
    tail = math.exp(logw[-1] - logz)
    if tail > _TRUNCATION_TOL:
        raise NumericalError(
            f"spectrum truncation error {tail:.3e} at beta={beta:g}; "
            "retain more states or enlarge the grid")
    return np.exp(logw - logz), logz


def ed_thermal(spectral: SpectralData, beta: float, A: Potential = None):
    """(Z, <A>, rho on grid) from the Boltzmann-weighted spectrum; <A> is
    None when no observable is given."""
    probs, logz = _boltzmann_probs(spectral, beta)
    dens_states = spectral.coeffs ** 2
    rho = (dens_states @ probs) / spectral.cell
    a_exp = None
    if A is not None:
        avals = evaluate_many(A, spectral.points)
        a_exp = float(probs @ (dens_states.T @ avals))
    return math.exp(logz), a_exp, rho


def ed_energy(spectral: SpectralData, beta: float) -> float:
    probs, _ = _boltzmann_probs(spectral, beta)
    return float(probs @ spectral.energies)


def ed_thermal_scan(spectral: SpectralData, temperatures, observables=(),
                    include_energy: bool = False) -> ThermalScan:
    """Same table schema as the ensemble scan, from the exact spectrum."""
    kts = np.asarray([float(t) for t in temperatures])
    if np.any(kts <= 0):
        raise ValidationError("temperatures must be positive")
    if np.any(np.diff(kts) >= 0):
        raise ValidationError("temperatures must be strictly descending")
    betas = 1.0 / kts
    names = [n for n, _ in observables]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate observable names")
    obs = [A for _, A in observables]
    alphas = [monomial_of(A) for A in obs]
    var_pairs = _variance_pairs(names, alphas, spectral.dim)
    dens_states = spectral.coeffs ** 2
    state_avgs = [dens_states.T @ evaluate_many(A, spectral.points) for A in obs]

    Z = np.empty(len(kts))
    cols = {n: np.empty(len(kts)) for n in names}
    for i, _, _ in var_pairs:
        cols[f"var_x{i+1}"] = np.empty(len(kts))
    if include_energy:
        cols["energy"] = np.empty(len(kts))
    for r, beta in enumerate(betas):
        probs, logz = _boltzmann_probs(spectral, beta)
        Z[r] = math.exp(logz)
        means = [float(probs @ sa) for sa in state_avgs]
        for n, v in zip(names, means):
            cols[n][r] = v
        for i, e1, e2 in var_pairs:
            cols[f"var_x{i+1}"][r] = means[e2] - means[e1] ** 2
        if include_energy:
            cols["energy"][r] = float(probs @ spectral.energies)
    return ThermalScan(kts, betas, Z, cols, np.zeros(len(kts), dtype=bool))


# --- classical Boltzmann quadrature -----------------------------------------

def _box_pairs(box, dim: int):
    box = tuple(box)
    if len(box) == 2 and np.isscalar(box[0]):
        box = (box,)
    if len(box) != dim:
        raise ValidationError("box must have one (a, b) pair per dimension")
    return [(float(a), float(b)) for a, b in box]


def _adaptive_line(fvec, a: float, b: float, epsrel: float = 1e-10,
                   max_rounds: int = 40) -> float:
    """Adaptive Simpson quadrature over one axis, vectorized over intervals:
    fvec maps an array of abscissae to values.  Interval halving with the
    usual |S2-S1|/15 error estimate and Richardson-extrapolated accumulation."""
    seeds = np.linspace(a, b, 17)
    lo, hi = seeds[:-1], seeds[1:]
    total = 0.0
    scale = 0.0
    for _ in range(max_rounds):
        if lo.size > 200000:
            raise NumericalError("line quadrature subdivision exploded")
        mid = 0.5 * (lo + hi)
        q1 = 0.5 * (lo + mid)
        q3 = 0.5 * (mid + hi)
        xs = np.concatenate([lo, q1, mid, q3, hi])
        vals = fvec(xs).reshape(5, lo.size)
        h = hi - lo
        s1 = h / 6.0 * (vals[0] + 4.0 * vals[2] + vals[4])
        s2 = h / 12.0 * (vals[0] + 4.0 * vals[1] + 2.0 * vals[2]
                         + 4.0 * vals[3] + vals[4])
        err = np.abs(s2 - s1) / 15.0
        est = total + float(np.sum(s2))
        scale = max(scale, abs(est))
        keep = err <= epsrel * max(scale, 1e-300) * (h / (b - a))
        # denormal-range panels carry pure roundoff in err and nothing in
        # value; refusing to accept them subdivides forever
        keep |= np.maximum(np.abs(s1), np.abs(s2)) < 1e-280
        total += float(np.sum((s2 + (s2 - s1) / 15.0)[keep]))
        if np.all(keep):
            return total
        lo, hi, mid = lo[~keep], hi[~keep], mid[~keep]
        lo = np.concatenate([lo, mid])
        hi = np.concatenate([mid, hi])
    raise NumericalError("line quadrature failed to converge")


def _config_integral(f, box, quad_points: int, epsrel: float = None,
                     scale: float = None) -> float:
    """Adaptive quadrature of f over a 1D or 2D box; the innermost axis is
    integrated with a vectorized pass so 2D integrands stay affordable.
    Roundoff-limited subdivision warnings are silenced; accuracy is enforced
    through the error estimate instead.  scale widens the acceptable absolute
    error for integrals whose value may vanish by symmetry (an average's
    numerator is accurate enough once its error is small next to the mass)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        if len(box) == 1:
            eps = 1e-10 if epsrel is None else float(epsrel)
            a, b = box[0]
            val, err = quad(lambda x: f(np.array([[x]]))[0], a, b,
                            limit=quad_points, epsabs=0.0, epsrel=eps)
            floor = max(abs(val), scale or 0.0, 1e-300)
            if err > max(1e-7, 10.0 * eps) * floor:
                raise NumericalError(
                    f"quadrature error estimate {err:.3e} too large for value {val:.3e}")
            return val
        eps = 1e-8 if epsrel is None else float(epsrel)
        (a1, b1), (a2, b2) = box

        def inner(y):
            return _adaptive_line(
                lambda xs: f(np.stack([xs, np.full(xs.size, y)], axis=-1)),
                a1, b1, epsrel=0.1 * eps)

        val, _ = quad(inner, a2, b2, limit=quad_points, epsabs=0.0, epsrel=eps)
    return val


def _strip_mass(weight, strip) -> float:
    """Midpoint-rule mass of the weight over one box-shaped strip; order of
    magnitude is all the tail guard needs."""
    axes = [np.linspace(a, b, 65)[:-1] + 0.5 * (b - a) / 64 for a, b in strip]
    cell = float(np.prod([(b - a) / 64 for a, b in strip]))
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(strip))
    return float(np.sum(weight(pts))) * cell


def _check_tail(weight, box, mass: float, quad_points: int):
    """Reject when the Boltzmann weight in a frame around the box is not
    negligible relative to the in-box mass."""
    if len(box) == 1:
        (a, b), = box
        w = 0.25 * (b - a)
        strips = [((a - w, a),), ((b, b + w),)]
    else:
        (a1, b1), (a2, b2) = box
        w1, w2 = 0.25 * (b1 - a1), 0.25 * (b2 - a2)
        strips = [((a1 - w1, a1), (a2 - w2, b2 + w2)),
                  ((b1, b1 + w1), (a2 - w2, b2 + w2)),
                  ((a1, b1), (a2 - w2, a2)),
                  ((a1, b1), (b2, b2 + w2))]
    extra = sum(_strip_mass(weight, s) for s in strips)
    if extra > _TAIL_TOL * abs(mass):
        raise ValidationError(
            f"Boltzmann mass outside the box: {extra:.3e} vs {mass:.3e}; enlarge the box")


def _classical_context(U: Potential, M: MassMatrix, beta: float, box,
                       quad_points: int, epsrel: float = None):
    """Boltzmann weight, its box mass (tail-checked), and the box pairs."""
    _diagonal_masses(M)
    beta = float(beta)
    if beta <= 0:
        raise ValidationError("beta must be positive")
    pairs = _box_pairs(box, U.dim)
    probe = np.stack(np.meshgrid(*[np.linspace(a, b, 41) for a, b in pairs],
                                 indexing="ij"), axis=-1).reshape(-1, U.dim)
    uref = float(np.min(evaluate_many(U, probe)))
    weight = lambda xs: np.exp(-beta * (evaluate_many(U, xs) - uref))
    mass = _config_integral(weight, pairs, quad_points, epsrel)
    if not (mass > 0 and np.isfinite(mass)):
        raise NumericalError("classical Boltzmann weight integrated to zero")
    _check_tail(weight, pairs, mass, quad_points)
    return pairs, weight, uref, mass


def _classical_average(ctx, A: Potential, quad_points: int,
                       epsrel: float = None) -> float:
    pairs, weight, _, mass = ctx
    num = _config_integral(lambda xs: evaluate_many(A, xs) * weight(xs),
                           pairs, quad_points, epsrel, scale=mass)
    return num / mass


def classical_thermal(U: Potential, M: MassMatrix, beta: float, A: Potential,
                      box, quad_points: int = 200, epsrel: float = None) -> float:
    """Classical Boltzmann average of a position observable; the momentum
    integral cancels between numerator and denominator."""
    if A.dim != U.dim:
        raise ValidationError("observable dimension does not match the potential")
    ctx = _classical_context(U, M, beta, box, quad_points, epsrel)
    return _classical_average(ctx, A, quad_points, epsrel)


def classical_partition(U: Potential, M: MassMatrix, beta: float, box,
                        quad_points: int = 200, epsrel: float = None) -> float:
    """Full classical Z including the Gaussian momentum integral (hbar = 1)."""
    masses = _diagonal_masses(M)
    beta = float(beta)
    pairs = _box_pairs(box, U.dim)
    weight = lambda xs: np.exp(-beta * evaluate_many(U, xs))
    conf = _config_integral(weight, pairs, quad_points, epsrel)
    mom = float(np.prod(np.sqrt(masses / (2.0 * math.pi * beta))))
    return mom * conf


def classical_thermal_scan(U: Potential, M: MassMatrix, temperatures,
                           observables=(), box=None, include_energy: bool = False,
                           quad_points: int = 200, epsrel: float = None) -> ThermalScan:
    """Classical analogue of the ensemble scan (same CSV schema)."""
    if box is None:
        raise ValidationError("classical scan needs an integration box")
    kts = np.asarray([float(t) for t in temperatures])
    if np.any(kts <= 0):
        raise ValidationError("temperatures must be positive")
    if np.any(np.diff(kts) >= 0):
        raise ValidationError("temperatures must be strictly descending")
    betas = 1.0 / kts
    names = [n for n, _ in observables]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate observable names")
    obs = [A for _, A in observables]
    alphas = [monomial_of(A) for A in obs]
    var_pairs = _variance_pairs(names, alphas, U.dim)

    Z = np.empty(len(kts))
    cols = {n: np.empty(len(kts)) for n in names}
    for i, _, _ in var_pairs:
        cols[f"var_x{i+1}"] = np.empty(len(kts))
    if include_energy:
        cols["energy"] = np.empty(len(kts))
    masses = _diagonal_masses(M)
    for r, beta in enumerate(betas):
        ctx = _classical_context(U, M, beta, box, quad_points, epsrel)
        uref, mass = ctx[2], ctx[3]
        mom = float(np.prod(np.sqrt(masses / (2.0 * math.pi * beta))))
        Z[r] = mom * mass * math.exp(-beta * uref)
        means = [_classical_average(ctx, A, quad_points, epsrel) for A in obs]
        for n, v in zip(names, means):
            cols[n][r] = v
        for i, e1, e2 in var_pairs:
            cols[f"var_x{i+1}"][r] = means[e2] - means[e1] ** 2
        if include_energy:
            cols["energy"][r] = (0.5 * U.dim * kts[r]
                                 + _classical_average(ctx, U, quad_points, epsrel))
    return ThermalScan(kts, betas, Z, cols, np.zeros(len(kts), dtype=bool))


# --- closed-form harmonic oscillator ----------------------------------------

@dataclass(frozen=True)
class HarmonicThermal:
    Z: float
    x2: float

    def rho(self, x) -> np.ndarray:
        """Thermal position density: centered Gaussian with variance <x^2>."""
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * x ** 2 / self.x2) / math.sqrt(2.0 * math.pi * self.x2)


def harmonic_analytic(omega: float, m: float, beta: float) -> HarmonicThermal:
    """Z = 1/(2 sinh(beta omega / 2)), <x^2> = coth(beta omega / 2)/(2 m omega)."""
    if omega <= 0 or m <= 0 or beta <= 0:
        raise ValidationError("omega, m, beta must all be positive")
    half = 0.5 * beta * omega
    return HarmonicThermal(0.5 / math.sinh(half),
                           1.0 / (2.0 * m * omega * math.tanh(half)))
