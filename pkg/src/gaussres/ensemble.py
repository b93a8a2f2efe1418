"""Grid resolution of identity, ensemble propagation, and thermal assembly.

A grid {(q_n, w_n)} approximates the identity; each point is initialized as a
narrow Gaussian at tau0 and propagated once in imaginary time to tau_max with
checkpoints at every beta/2 a temperature scan will request.  Assemblies are
log-domain reductions over the stored checkpoints:

    Z(beta)      = sum_n w_n <lam_n|lam_n>            at tau = beta/2
    <A>(beta)    = Z^-1 sum_n w_n <lam_n|A|lam_n>
    rho(x; beta) = Z^-1 sum_n w_n <x|lam_n><lam_n|x>
"""

from __future__ import annotations

import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import gaussmath as gm
from . import varprop as vp
from .errors import GaussResError, NumericalError, ValidationError
from .potential import MassMatrix, Potential, PolyGaussTerm

WORKERS_ENV = "GAUSSRES_WORKERS"


@dataclass(frozen=True)
class GridSpec:
    """Configuration grid: equidistant cell centers, explicit points, or
    uniform random samples in a box."""

    mode: str
    dim: int
    bounds: tuple = None          # ((lo, hi), ...) for equidistant/uniform_random
    counts: tuple = None          # per-dimension counts for equidistant
    points: np.ndarray = None     # explicit mode
    weights: np.ndarray = None    # explicit mode
    n_samples: int = None         # uniform_random mode
    seed: int = None              # uniform_random mode

    @classmethod
    def equidistant(cls, bounds, counts) -> "GridSpec":
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        counts = tuple(int(c) for c in counts)
        if len(bounds) != len(counts):
            raise ValidationError("bounds and counts must have the same length")
        for (a, b), c in zip(bounds, counts):
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValidationError(f"bad bounds ({a}, {b})")
            if c < 1:
                raise ValidationError(f"counts must be >= 1, got {c}")
        return cls("equidistant", len(bounds), bounds=bounds, counts=counts)

    @classmethod
    def explicit(cls, points, weights) -> "GridSpec":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if points.shape[0] != weights.shape[0]:
            raise ValidationError("points and weights must have equal length")
        if not np.all(weights > 0):
            raise ValidationError("weights must be positive")
        return cls("explicit", points.shape[1], points=points, weights=weights)

    @classmethod
    def uniform_random(cls, n_samples, bounds, seed=0) -> "GridSpec":
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        for a, b in bounds:
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValidationError(f"bad bounds ({a}, {b})")
        if int(n_samples) < 1:
            raise ValidationError("n_samples must be >= 1")
        return cls("uniform_random", len(bounds), bounds=bounds,
                   n_samples=int(n_samples), seed=int(seed))


def build_grid(spec: GridSpec):
    """Return (points (N, D), weights (N,)); equidistant weights are exact
    cell volumes, uniform_random weights are volume/N."""
    if spec.mode == "equidistant":
        axes = []
        vol = 1.0
        for (a, b), n in zip(spec.bounds, spec.counts):
            h = (b - a) / n
            axes.append(a + h * (np.arange(n) + 0.5))
            vol *= h
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        return points, np.full(points.shape[0], vol)
    if spec.mode == "explicit":
        return spec.points.copy(), spec.weights.copy()
    if spec.mode == "uniform_random":
        rng = np.random.default_rng(spec.seed)
        lo = np.array([a for a, _ in spec.bounds])
        hi = np.array([b for _, b in spec.bounds])
        points = lo + rng.random((spec.n_samples, spec.dim)) * (hi - lo)
        vol = float(np.prod(hi - lo))
        return points, np.full(spec.n_samples, vol / spec.n_samples)
    raise ValidationError(f"unknown grid mode {spec.mode!r}")


@dataclass
class WeightedTrajectory:
    qn: np.ndarray
    wn: float
    trajectory: vp.Trajectory

    def lam_at(self, tau: float) -> gm.GaussianParam:
        return self.trajectory.lam_at(tau)


class Ensemble(list):
    """List of WeightedTrajectory plus run context (mass, potential, grid)."""

    def __init__(self, members, M: MassMatrix, U: Potential, tau0: float,
                 failures=None):
        super().__init__(members)
        self.M = M
        self.U = U
        self.tau0 = tau0
        self.failures = list(failures or [])


def _normalize_grid(grid):
    if isinstance(grid, GridSpec):
        return build_grid(grid)
    if isinstance(grid, tuple) and len(grid) == 2:
        points, weights = grid
        return (np.atleast_2d(np.asarray(points, dtype=float)),
                np.atleast_1d(np.asarray(weights, dtype=float)))
    pairs = list(grid)
    points = np.atleast_2d(np.asarray([p for p, _ in pairs], dtype=float))
    weights = np.asarray([w for _, w in pairs], dtype=float)
    return points, weights


def checkpoint_taus(temperatures) -> list[float]:
    """Ascending list of tau = beta/2 = 1/(2 kT) for a temperature list."""
    taus = sorted({1.0 / (2.0 * float(kt)) for kt in temperatures})
    if any(t <= 0 or not math.isfinite(t) for t in taus):
        raise ValidationError("temperatures must be positive and finite")
    return taus


def _propagate_member(args):
    (qn, wn, M, U, tau0, targets, mask, config) = args
    lam0 = vp.init_delta(qn, M, U, tau0)
    traj = vp.propagate(lam0, tau0, targets, M, U, mask=mask, config=config)
    return WeightedTrajectory(qn, wn, traj)


def resolve_workers(n_workers=None) -> int:
    if n_workers is None:
        env = os.environ.get(WORKERS_ENV)
        if env is not None:
            try:
                n_workers = int(env)
            except ValueError:
                raise ValidationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        else:
            n_workers = os.cpu_count() or 1
    if n_workers < 1:
        raise ValidationError("worker count must be >= 1")
    return n_workers


def propagate_ensemble(grid, M: MassMatrix, U: Potential, tau_max: float,
                       checkpoint_taus, mask=None,
                       config: vp.IntegratorConfig | None = None,
                       n_workers=None, failure_policy: str = "abort") -> Ensemble:
    """Propagate every grid member once to tau_max with the given checkpoints.

    failure_policy: 'abort' re-raises the first member failure; 'drop' skips
    failing members with a loud warning and records them in .failures.
    """
    if failure_policy not in ("abort", "drop"):
        raise ValidationError(f"unknown failure policy {failure_policy!r}")
    config = config or vp.IntegratorConfig()
    tau0 = config.tau0
    points, weights = _normalize_grid(grid)
    if points.shape[1] != M.dim:
        raise ValidationError(f"grid dimension {points.shape[1]} != mass dimension {M.dim}")
    targets = [float(t) for t in checkpoint_taus]
    if any(t <= tau0 for t in targets):
        raise ValidationError(f"checkpoints must exceed tau0={tau0:g}")
    if any(t > tau_max * (1 + 1e-12) for t in targets):
        raise ValidationError("checkpoints must not exceed tau_max")
    if tau_max > tau0 and (not targets or targets[-1] < tau_max):
        targets = targets + [float(tau_max)]
    mask = gm.validate_mask(mask, M.dim)

    jobs = [(points[i], float(weights[i]), M, U, tau0, targets, mask, config)
            for i in range(points.shape[0])]
    n_workers = resolve_workers(n_workers)
    members = []
    failures = []

    def handle(i, result, err):
        if err is None:
            members.append(result)
            return
        if failure_policy == "abort":
            raise type(err)(f"member {i} at q={points[i].tolist()}: {err}") from err
        warnings.warn(f"dropping member {i} at q={points[i].tolist()}: {err}",
                      stacklevel=3)
        failures.append((points[i].copy(), str(err)))

    if n_workers == 1 or len(jobs) == 1:
        for i, job in enumerate(jobs):
            try:
                res = _propagate_member(job)
            except GaussResError as exc:
                handle(i, None, exc)
            else:
                handle(i, res, None)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_propagate_member, job) for job in jobs]
            for i, fut in enumerate(futures):
                try:
                    res = fut.result()
                except GaussResError as exc:
                    handle(i, None, exc)
                else:
                    handle(i, res, None)
    if not members:
        raise NumericalError("all ensemble members failed")
    return Ensemble(members, M, U, tau0, failures)


# --- thermal assembly -------------------------------------------------------

def _member_states(ensemble, beta: float):
    tau = 0.5 * float(beta)
    return [(m.wn, m.lam_at(tau)) for m in ensemble]


def _log_terms(states):
    """log(w_n <lam_n|lam_n>) per member."""
    return np.array([math.log(w) + gm.log_overlap(lam, lam) for w, lam in states])


def _signed_logsumexp(logs, signs):
    """(log|sum s_i e^{a_i}|, sign); hand-rolled because scipy 1.15's
    return_sign path yields NaN under near-perfect cancellation."""
    amax = np.max(logs)
    s = float(np.sum(signs * np.exp(logs - amax)))
    if s == 0.0:
        return -math.inf, 0.0
    return math.log(abs(s)) + amax, math.copysign(1.0, s)


def _signed_ratio_sum(states, log_norms, values):
    """sum_n w_n e^{2 gamma_n} v_n relative to sum_n w_n <lam_n|lam_n>,
    evaluated in log domain; values v_n are gamma-stripped elements."""
    num_logs = []
    num_signs = []
    for (w, lam), v in zip(states, values):
        if v == 0.0:
            continue
        num_logs.append(math.log(w) + 2.0 * lam.gamma + math.log(abs(v)))
        num_signs.append(math.copysign(1.0, v))
    if not num_logs:
        return 0.0
    lden = logsumexp(log_norms)
    lnum, sign = _signed_logsumexp(np.array(num_logs), np.array(num_signs))
    return float(sign * math.exp(lnum - lden))


def partition_function(ensemble, beta: float) -> float:
    """Z(beta) = sum_n w_n <lam_n(beta/2)|lam_n(beta/2)>, log-domain."""
    states = _member_states(ensemble, beta)
    return float(math.exp(logsumexp(_log_terms(states))))


def log_partition_function(ensemble, beta: float) -> float:
    return float(logsumexp(_log_terms(_member_states(ensemble, beta))))


def expectation(ensemble, beta: float, A: Potential) -> float:
    """<A>(beta) = Z^-1 sum_n w_n <lam_n|A|lam_n>."""
    states = _member_states(ensemble, beta)
    vals = [gm.observable_element(lam.with_gamma(0.0), lam.with_gamma(0.0), A)
            for _, lam in states]
    return _signed_ratio_sum(states, _log_terms(states), vals)


def energy_expectation(ensemble, beta: float, M: MassMatrix | None = None,
                       U: Potential | None = None) -> float:
    """<H>(beta) via Hamiltonian elements at the checkpoint."""
    M = M if M is not None else ensemble.M
    U = U if U is not None else ensemble.U
    states = _member_states(ensemble, beta)
    vals = [gm.hamiltonian_element(lam.with_gamma(0.0), lam.with_gamma(0.0), M, U)
            for _, lam in states]
    return _signed_ratio_sum(states, _log_terms(states), vals)


def density_profile(ensemble, beta: float, x_points) -> np.ndarray:
    """rho(x) = Z^-1 sum_n w_n |<x|lam_n>|^2 at the requested points."""
    states = _member_states(ensemble, beta)
    xs = np.asarray(x_points, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    logs = np.empty((len(states), xs.shape[0]))
    for k, (w, lam) in enumerate(states):
        d = xs - lam.q
        quad = np.einsum("ni,ij,nj->n", d, lam.G, d)
        logs[k] = math.log(w) + 2.0 * (lam.gamma - 0.5 * quad)
    lden = logsumexp(_log_terms(states))
    return np.exp(logsumexp(logs, axis=0) - lden)


# --- temperature scans ------------------------------------------------------

def monomial_of(A: Potential):
    """The multi-index if A is exactly one unit-coefficient monomial."""
    if len(A.terms) != 1:
        return None
    t = A.terms[0]
    if t.has_gauss or len(t.poly) != 1:
        return None
    (alpha, c), = t.poly.items()
    if t.coeff * c != 1.0:
        return None
    return alpha


def monomial_observable(dim: int, alpha) -> Potential:
    term = PolyGaussTerm(1.0, {tuple(alpha): 1.0}, np.zeros(dim), np.zeros((dim, dim)))
    return Potential(dim, (term,))


@dataclass
class ThermalScan:
    """Table over descending temperatures of Z plus requested columns."""

    temperatures: np.ndarray
    betas: np.ndarray
    Z: np.ndarray
    columns: dict[str, np.ndarray]
    reg_flags: np.ndarray

    def to_csv(self, path=None) -> str:
        names = list(self.columns)
        buf = io.StringIO()
        buf.write(",".join(["kT", "beta", "Z"] + names) + "\n")
        for r in range(len(self.temperatures)):
            row = [self.temperatures[r], self.betas[r], self.Z[r]]
            row += [self.columns[n][r] for n in names]
            buf.write(",".join("%.17g" % v for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            write_atomic(path, text)
        return text


def write_atomic(path, text: str):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _reg_flag_taus(ensemble) -> list[float]:
    """Earliest regularized-RHS tau per member (inf when none)."""
    out = []
    for m in ensemble:
        regs = [t for t, _, reg in m.trajectory.diagnostics.rhs_records if reg]
        out.append(min(regs) if regs else math.inf)
    return out


def _variance_pairs(names, alphas, dim: int):
    """Indices of (x_i, x_i^2) observable pairs for derived variance columns."""
    pairs = []
    for i in range(dim):
        e1 = tuple(1 if k == i else 0 for k in range(dim))
        e2 = tuple(2 if k == i else 0 for k in range(dim))
        try:
            pairs.append((i, alphas.index(e1), alphas.index(e2)))
        except ValueError:
            continue
    return pairs


def thermal_scan(ensemble, temperatures, observables=(),
                 include_energy: bool = False) -> ThermalScan:
    """Tabulate Z and requested observables per temperature (descending kT).

    observables: sequence of (name, Potential).  When both x_i and x_i^2 are
    present, a derived var_x{i} column is appended.
    """
    kts = np.asarray([float(t) for t in temperatures])
    if np.any(kts <= 0):
        raise ValidationError("temperatures must be positive")
    if np.any(np.diff(kts) >= 0):
        raise ValidationError("temperatures must be strictly descending")
    betas = 1.0 / kts
    names = [n for n, _ in observables]
    obs = [A for _, A in observables]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate observable names")
    alphas = [monomial_of(A) for A in obs]
    dim = ensemble.M.dim
    var_pairs = _variance_pairs(names, alphas, dim)

    Z = np.empty(len(kts))
    cols = {n: np.empty(len(kts)) for n in names}
    for i, e1, e2 in var_pairs:
        cols[f"var_x{i+1}"] = np.empty(len(kts))
    if include_energy:
        cols["energy"] = np.empty(len(kts))
    reg_taus = _reg_flag_taus(ensemble)
    flags = np.zeros(len(kts), dtype=bool)

    for r, beta in enumerate(betas):
        states = _member_states(ensemble, beta)
        log_norms = _log_terms(states)
        Z[r] = math.exp(logsumexp(log_norms))
        stripped = [(w, lam.with_gamma(0.0)) for w, lam in states]
        means = []
        for n, A in zip(names, obs):
            vals = [gm.observable_element(lam, lam, A) for _, lam in stripped]
            v = _signed_ratio_sum(states, log_norms, vals)
            cols[n][r] = v
            means.append(v)
        for i, e1, e2 in var_pairs:
            cols[f"var_x{i+1}"][r] = means[e2] - means[e1] ** 2
        if include_energy:
            vals = [gm.hamiltonian_element(lam, lam, ensemble.M, ensemble.U)
                    for _, lam in stripped]
            cols["energy"][r] = _signed_ratio_sum(states, log_norms, vals)
        tau = 0.5 * beta
        flags[r] = any(t <= tau for t in reg_taus)
    return ThermalScan(kts, betas, Z, cols, flags)


def density_csv(xs: np.ndarray, rho: np.ndarray, path=None) -> str:
    """Density table: x[,y],rho."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    dim = xs.shape[1]
    header = ",".join(["x", "y"][:dim] + ["rho"])
    buf = io.StringIO()
    buf.write(header + "\n")
    for p, r in zip(xs, rho):
        buf.write(",".join("%.17g" % v for v in list(p) + [r]) + "\n")
    text = buf.getvalue()
    if path is not None:
        write_atomic(path, text)
    return text
