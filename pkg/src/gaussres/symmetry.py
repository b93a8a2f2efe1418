"""Reflection and permutation symmetry adaptation.

A symmetry-adapted wavepacket is a signed sum of group-transformed Gaussians,

    |lam, s> = c sum_g s_g T_g |lam>,      (T_g psi)(x) = psi(R_g x),

with one sign character s_g per sector (even/odd under reflection,
boson/fermion under particle exchange) and c = 1/sqrt(2) per side for
reflection, c = 1 for permutations.  Every matrix element between adapted
states reduces to plain Gaussian elements; the equations of motion keep the
bare parameters lam and chain ket derivatives through the constant linear
reparameterization of each group transform.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gaussmath as gm
from . import varprop as vp
from .ensemble import (ThermalScan, WeightedTrajectory, _normalize_grid,
                       _signed_logsumexp, _variance_pairs, monomial_of,
                       resolve_workers)
from .errors import (GaussResError, NumericalError, SectorCollapseError,
                     ValidationError)
from .potential import MassMatrix, Potential, evaluate_many

MAX_PARTICLES = 6
_SPOT_SEED = 182634059
_COLLAPSE_TOL = 1e-12
_DROP_TOL = 1e-12
_FIXED_TOL = 1e-10


@dataclass(frozen=True)
class SymmetryAdapter:
    """One symmetry sector: group rotations, sign character, normalization.

    rotations[0] is always the identity with sign +1.  jacobians[g] is the
    constant matrix d(params of T_g lam)/d(params of lam) in packing order.
    """

    kind: str
    sector: str
    dim: int
    rotations: tuple
    signs: tuple
    jacobians: tuple
    c_side: float
    prefactor: float
    n_particles: int = None
    particle_dim: int = None

    @property
    def group_order(self) -> int:
        return len(self.rotations)

    @property
    def norm_factor(self) -> float:
        """Factor on the reduced single group sum: c^2 |G|."""
        return self.c_side ** 2 * len(self.rotations)


def transform(lam: gm.GaussianParam, R) -> gm.GaussianParam:
    """Apply (T psi)(x) = psi(R x): parameters (R^T G R, R^T q, gamma)."""
    R = np.asarray(R, dtype=float)
    Gt = R.T @ lam.G @ R
    return gm.GaussianParam(0.5 * (Gt + Gt.T), R.T @ lam.q, lam.gamma)


def _transform_trusted(lam: gm.GaussianParam, R) -> gm.GaussianParam:
    Gt = R.T @ lam.G @ R
    return gm.GaussianParam._trusted(Gt, R.T @ lam.q, lam.gamma)


def transform_jacobian(R, dim: int) -> np.ndarray:
    """Constant Jacobian of the parameter map (G, q, gamma) ->
    (R^T G R, R^T q, gamma) in packing order."""
    R = np.asarray(R, dtype=float)
    pairs = gm.triu_pairs(dim)
    nt = len(pairs)
    P = nt + dim + 1
    J = np.zeros((P, P))
    for col, (k, l) in enumerate(pairs):
        B = np.zeros((dim, dim))
        B[k, l] = 1.0
        B[l, k] = 1.0
        T = R.T @ B @ R
        for row, (i, j) in enumerate(pairs):
            J[row, col] = T[i, j]
    J[nt:nt + dim, nt:nt + dim] = R.T
    J[P - 1, P - 1] = 1.0
    return J


def _spot_points(dim: int, n: int = 24) -> np.ndarray:
    rng = np.random.default_rng(_SPOT_SEED)
    return rng.uniform(-2.5, 2.5, size=(n, dim))


def _check_invariance(adapter: "SymmetryAdapter", A: Potential) -> bool:
    """Spot check A(R x) = A(x) for every group rotation."""
    if A.dim != adapter.dim:
        raise ValidationError(f"operator dimension {A.dim} != adapter dimension {adapter.dim}")
    pts = _spot_points(adapter.dim)
    vals = evaluate_many(A, pts)
    tol = 1e-9 * (1.0 + float(np.max(np.abs(vals))))
    for R in adapter.rotations[1:]:
        if np.max(np.abs(evaluate_many(A, pts @ R.T) - vals)) > tol:
            return False
    return True


def validate_system(adapter: "SymmetryAdapter", M: MassMatrix, U: Potential):
    """Reject the adapter unless kinetic and potential terms commute with the
    group action (spot-checked)."""
    if M.dim != adapter.dim:
        raise ValidationError(f"mass dimension {M.dim} != adapter dimension {adapter.dim}")
    Minv = M.inverse
    mtol = 1e-10 * (1.0 + float(np.max(np.abs(Minv))))
    for R in adapter.rotations[1:]:
        if np.max(np.abs(R.T @ Minv @ R - Minv)) > mtol:
            raise ValidationError("mass matrix is not invariant under the symmetry group")
    if not _check_invariance(adapter, U):
        raise ValidationError("potential fails the symmetry spot check")


def reflection_adapter(M: MassMatrix, U: Potential, sector: str) -> SymmetryAdapter:
    """Sector of the reflection x -> -x; sector in {'even', 'odd'}."""
    if sector not in ("even", "odd"):
        raise ValidationError(f"reflection sector must be 'even' or 'odd', got {sector!r}")
    dim = M.dim
    rotations = (np.eye(dim), -np.eye(dim))
    signs = (1.0, 1.0) if sector == "even" else (1.0, -1.0)
    jac = tuple(transform_jacobian(R, dim) for R in rotations)
    adapter = SymmetryAdapter("reflection", sector, dim, rotations, signs, jac,
                              1.0 / math.sqrt(2.0), 0.5)
    validate_system(adapter, M, U)
    return adapter


def _perm_parity(perm) -> int:
    seen = [False] * len(perm)
    parity = 0
    for start in range(len(perm)):
        if seen[start]:
            continue
        length = 0
        i = start
        while not seen[i]:
            seen[i] = True
            i = perm[i]
            length += 1
        parity ^= (length - 1) & 1
    return -1 if parity else 1


def permutation_adapter(M: MassMatrix, U: Potential, n_particles: int,
                        particle_dim: int, statistics: str) -> SymmetryAdapter:
    """Exchange symmetry of n identical particles with d coordinates each;
    statistics in {'boson', 'fermion'}.  D = n*d, particle-major packing."""
    if statistics not in ("boson", "fermion"):
        raise ValidationError(f"statistics must be 'boson' or 'fermion', got {statistics!r}")
    n, d = int(n_particles), int(particle_dim)
    if n < 2 or d < 1:
        raise ValidationError("need n_particles >= 2 and particle_dim >= 1")
    if n > MAX_PARTICLES:
        raise ValidationError(f"n_particles capped at {MAX_PARTICLES} (factorial group size)")
    dim = n * d
    if M.dim != dim or U.dim != dim:
        raise ValidationError(f"system dimension must be n*d = {dim}")
    rotations = []
    signs = []
    for perm in itertools.permutations(range(n)):
        P = np.eye(n)[list(perm)]
        rotations.append(np.kron(P, np.eye(d)))
        signs.append(1.0 if statistics == "boson" else float(_perm_parity(perm)))
    jac = tuple(transform_jacobian(R, dim) for R in rotations)
    adapter = SymmetryAdapter("permutation", statistics, dim, tuple(rotations),
                              tuple(signs), jac, 1.0,
                              1.0 / math.factorial(n) ** 2, n, d)
    validate_system(adapter, M, U)
    return adapter


# --- symmetrized matrix elements --------------------------------------------

def _group_sum(bra: gm.GaussianParam, ket: gm.GaussianParam,
               adapter: SymmetryAdapter, element) -> float:
    total = 0.0
    for R, s in zip(adapter.rotations, adapter.signs):
        total += s * element(bra, transform(ket, R))
    return adapter.norm_factor * total


def _double_sum(bra: gm.GaussianParam, ket: gm.GaussianParam,
                adapter: SymmetryAdapter, element) -> float:
    total = 0.0
    for Rb, sb in zip(adapter.rotations, adapter.signs):
        tb = transform(bra, Rb)
        for Rk, sk in zip(adapter.rotations, adapter.signs):
            total += sb * sk * element(tb, transform(ket, Rk))
    return adapter.c_side ** 2 * total


def sym_element(kind: str, bra: gm.GaussianParam, ket: gm.GaussianParam,
                adapter: SymmetryAdapter, M: MassMatrix = None,
                U: Potential = None, A: Potential = None) -> float:
    """<bra, s|O|ket, s> for O in {overlap, hamiltonian, observable}.

    Group-invariant operators use the reduced single sum over group elements;
    a non-invariant observable falls back to the full double sum, which is
    correct for any operator.
    """
    if bra.dim != adapter.dim or ket.dim != adapter.dim:
        raise ValidationError("state dimension does not match adapter")
    if kind == "overlap":
        return _group_sum(bra, ket, adapter, gm.overlap)
    if kind == "hamiltonian":
        if M is None or U is None:
            raise ValidationError("hamiltonian element needs M and U")
        validate_system(adapter, M, U)
        return _group_sum(bra, ket, adapter,
                          lambda b, k: gm.hamiltonian_element(b, k, M, U))
    if kind == "observable":
        if A is None:
            raise ValidationError("observable element needs A")
        element = lambda b, k: gm.observable_element(b, k, A)
        if _check_invariance(adapter, A):
            return _group_sum(bra, ket, adapter, element)
        return _double_sum(bra, ket, adapter, element)
    raise ValidationError(f"unknown element kind {kind!r}")


# --- symmetry-adapted equations of motion -----------------------------------

def make_sym_eom_solver(adapter: SymmetryAdapter, M: MassMatrix, U: Potential,
                        mask: np.ndarray, eps: float):
    """lam -> (active derivative, cond estimate, regularized) for the
    sector flow.  Identity-element blocks come from the closed-form self
    pair; each remaining group element adds cross blocks chained through its
    constant parameter Jacobian."""
    validate_system(adapter, M, U)
    dim = adapter.dim
    full = gm.validate_mask(None, dim)
    self_fn = gm.make_gram_force(M, U, dim, full)
    pair_fn = gm.make_pair_blocks(M, U, dim)
    idx = np.flatnonzero(mask)
    sub = np.ix_(idx, idx)
    rest = list(zip(adapter.rotations, adapter.signs, adapter.jacobians))[1:]

    P = gm.param_count(dim)

    def solver(lam: gm.GaussianParam):
        lam0 = lam.with_gamma(0.0)  # every term scales by e^{2 gamma}
        base = gm.pack(lam0)
        ptol = _FIXED_TOL * (1.0 + float(np.max(np.abs(base))))
        gram, force = self_fn(lam0)
        norm_plain = gram[-1, -1]
        fixed = []
        for R, s, J in rest:
            ket = _transform_trusted(lam0, R)
            Eg, hg = pair_fn(lam0, ket)
            if s > 0:
                gram += Eg @ J
                force += hg
                if np.max(np.abs(gm.pack(ket) - base)) <= ptol:
                    fixed.append(J)
            else:
                gram -= Eg @ J
                force -= hg
        if gram[-1, -1] <= _COLLAPSE_TOL * norm_plain:
            raise SectorCollapseError(
                f"{adapter.sector} sector norm fell to "
                f"{gram[-1, -1] / norm_plain:.3e} of the plain norm")
        gram = 0.5 * (gram + gram.T)
        if not fixed:
            return vp.solve_gram_system(gram[sub], -force[idx], eps)
        # A state pinned by sign +1 group elements (a coincident pair in a
        # boson sector, a centered state in the even sector) keeps their
        # antisymmetric parameter moves redundant: they cancel in the adapted
        # sum, leaving exact null directions in the sector Gram.  Solve on
        # the invariant subspace and freeze the rest, which also keeps the
        # trajectory on the pinned submanifold.
        proj = np.eye(P)
        for J in fixed:
            proj = proj + J
        proj /= 1.0 + len(fixed)
        psub = proj[sub]
        w, V = np.linalg.eigh(0.5 * (psub + psub.T))
        Q = V[:, w > 0.5]
        x, cond, reg = vp.solve_gram_system(Q.T @ gram[sub] @ Q,
                                            -(Q.T @ force[idx]), eps)
        return Q @ x, cond, reg

    return solver


def sym_eom_rhs(lam: gm.GaussianParam, adapter: SymmetryAdapter,
                M: MassMatrix, U: Potential, mask=None,
                eps: float = 1e-10) -> np.ndarray:
    """Full packed parameter derivative under the sector flow (inactive
    entries zero)."""
    mask = gm.validate_mask(mask, lam.dim)
    solver = make_sym_eom_solver(adapter, M, U, mask, eps)
    deriv, _, _ = solver(lam)
    out = np.zeros(gm.param_count(lam.dim))
    out[mask] = deriv
    return out


# --- sector propagation ------------------------------------------------------

@dataclass
class SectorRun:
    """Propagated members of one sector plus exact-zero-norm drops."""

    adapter: SymmetryAdapter
    members: list
    dropped: list
    failures: list


@dataclass
class SymEnsemble:
    """Per-sector ensembles sharing one grid, mass matrix, and potential."""

    runs: dict
    M: MassMatrix
    U: Potential
    tau0: float

    @property
    def sectors(self):
        return list(self.runs)


def sector_norm_ratio(lam: gm.GaussianParam, adapter: SymmetryAdapter) -> float:
    """Sector norm over (norm_factor times) the plain norm; exactly 0 for a
    state fixed by a sign -1 group element (Pauli exclusion)."""
    lam0 = lam.with_gamma(0.0)
    plain = gm.overlap(lam0, lam0)
    total = 0.0
    for R, s in zip(adapter.rotations, adapter.signs):
        total += s * gm.overlap(lam0, transform(lam0, R))
    return total / (plain * adapter.group_order)


def _fully_pinned(lam0: gm.GaussianParam, adapter: SymmetryAdapter) -> bool:
    """True when every group element maps the state to itself and carries
    sign +1.  All transformed copies then share one parameter set, the sector
    Gram and force are twice the plain ones on the invariant directions, and
    the sector flow reduces to the plain flow, which is far better
    conditioned (the sector system is exactly singular transverse to the
    pinned submanifold)."""
    if any(s < 0 for s in adapter.signs):
        return False
    base = gm.pack(lam0)
    tol = _FIXED_TOL * (1.0 + float(np.max(np.abs(base))))
    for R in adapter.rotations[1:]:
        if np.max(np.abs(gm.pack(_transform_trusted(lam0, R)) - base)) > tol:
            return False
    return True


def _propagate_sym_member(args):
    (qn, wn, adapter, M, U, targets, mask, config) = args
    lam0 = vp.init_delta(qn, M, U, config.tau0)
    if _fully_pinned(lam0, adapter):
        solver = vp.make_eom_solver(M, U, mask, config.gram_regularization,
                                    lam0.dim)
        label = f"{adapter.sector} sector (pinned member): "
    else:
        solver = make_sym_eom_solver(adapter, M, U, mask,
                                     config.gram_regularization)
        label = f"{adapter.sector} sector: "
    traj = vp.integrate_flow(lam0, config.tau0, targets, mask, config, solver,
                             label=label)
    return WeightedTrajectory(qn, wn, traj)


def propagate_sym(grid, M: MassMatrix, U: Potential, adapters, tau_max: float,
                  checkpoint_taus, mask=None, config: vp.IntegratorConfig = None,
                  n_workers=None, failure_policy: str = "abort") -> SymEnsemble:
    """Propagate every grid member once per requested sector.

    Members whose initial sector norm vanishes are removed exactly (recorded
    in SectorRun.dropped); they carry zero weight in the sector for all tau.
    """
    if isinstance(adapters, SymmetryAdapter):
        adapters = [adapters]
    adapters = list(adapters)
    if not adapters:
        raise ValidationError("need at least one symmetry sector")
    if len({a.sector for a in adapters}) != len(adapters):
        raise ValidationError("duplicate sectors requested")
    for a in adapters:
        validate_system(a, M, U)
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
    n_workers = resolve_workers(n_workers)

    runs = {}
    for adapter in adapters:
        jobs = []
        dropped = []
        failures = []
        for i in range(points.shape[0]):
            lam0 = vp.init_delta(points[i], M, U, tau0)
            ratio = sector_norm_ratio(lam0, adapter)
            if ratio <= _DROP_TOL:
                dropped.append((points[i].copy(), float(weights[i]),
                                f"initial {adapter.sector} sector norm ratio {ratio:.3e}"))
                continue
            jobs.append((i, (points[i], float(weights[i]), adapter, M, U,
                             targets, mask, config)))
        members = []

        def handle(i, result, err):
            if err is None:
                members.append(result)
                return
            if failure_policy == "abort":
                raise type(err)(f"member {i} at q={points[i].tolist()}: {err}") from err
            warnings.warn(f"dropping member {i} at q={points[i].tolist()}: {err}",
                          stacklevel=3)
            failures.append((points[i].copy(), str(err)))

        if n_workers == 1 or len(jobs) <= 1:
            for i, job in jobs:
                try:
                    res = _propagate_sym_member(job)
                except GaussResError as exc:
                    handle(i, None, exc)
                else:
                    handle(i, res, None)
        else:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                futures = [(i, pool.submit(_propagate_sym_member, job))
                           for i, job in jobs]
                for i, fut in futures:
                    try:
                        res = fut.result()
                    except GaussResError as exc:
                        handle(i, None, exc)
                    else:
                        handle(i, res, None)
        if not members and not dropped:
            raise NumericalError(f"all members of sector {adapter.sector} failed")
        runs[adapter.sector] = SectorRun(adapter, members, dropped, failures)
    return SymEnsemble(runs, M, U, tau0)


# --- thermal assembly --------------------------------------------------------

def _sector_states(run: SectorRun, beta: float):
    tau = 0.5 * float(beta)
    return [(m.wn, m.trajectory.lam_at(tau)) for m in run.members]


def _stripped_sym_overlap(lam0: gm.GaussianParam, adapter: SymmetryAdapter) -> float:
    total = 0.0
    for R, s in zip(adapter.rotations, adapter.signs):
        total += s * gm.overlap(lam0, transform(lam0, R))
    return adapter.norm_factor * total


def _partition_terms(se: SymEnsemble, beta: float):
    """(log|term|, sign) arrays over all sectors and members."""
    logs = []
    signs = []
    for run in se.runs.values():
        lp = math.log(run.adapter.prefactor)
        for w, lam in _sector_states(run, beta):
            v = _stripped_sym_overlap(lam.with_gamma(0.0), run.adapter)
            if v == 0.0:
                continue
            logs.append(math.log(w) + 2.0 * lam.gamma + lp + math.log(abs(v)))
            signs.append(math.copysign(1.0, v))
    if not logs:
        raise NumericalError("no sector members contribute to the partition function")
    return np.array(logs), np.array(signs)


def sym_log_partition_function(se: SymEnsemble, beta: float) -> float:
    lnum, sign = _signed_logsumexp(*_partition_terms(se, beta))
    if sign <= 0:
        raise NumericalError("sector-summed partition function is not positive")
    return float(lnum)


def sym_partition_function(se: SymEnsemble, beta: float) -> float:
    return float(math.exp(sym_log_partition_function(se, beta)))


def _ratio_assembly(se: SymEnsemble, beta: float, member_value) -> float:
    """sum over sectors and members of prefactor*w*e^{2 gamma}*value, divided
    by the same assembly of sector norms."""
    den_logs, den_signs = _partition_terms(se, beta)
    num_logs = []
    num_signs = []
    for run in se.runs.values():
        lp = math.log(run.adapter.prefactor)
        for w, lam in _sector_states(run, beta):
            v = member_value(lam.with_gamma(0.0), run.adapter)
            if v == 0.0:
                continue
            num_logs.append(math.log(w) + 2.0 * lam.gamma + lp + math.log(abs(v)))
            num_signs.append(math.copysign(1.0, v))
    if not num_logs:
        return 0.0
    lden, dsign = _signed_logsumexp(den_logs, den_signs)
    lnum, nsign = _signed_logsumexp(np.array(num_logs), np.array(num_signs))
    return float(nsign * dsign * math.exp(lnum - lden))


def sym_expectation(se: SymEnsemble, beta: float, A: Potential) -> float:
    """<A> assembled over all sectors (invariant A uses the reduced sum)."""
    reduced = {name: _check_invariance(run.adapter, A)
               for name, run in se.runs.items()}

    def value(lam0, adapter):
        element = lambda b, k: gm.observable_element(b, k, A)
        if reduced[adapter.sector]:
            return _group_sum(lam0, lam0, adapter, element)
        return _double_sum(lam0, lam0, adapter, element)

    return _ratio_assembly(se, beta, value)


def sym_energy(se: SymEnsemble, beta: float) -> float:
    M, U = se.M, se.U

    def value(lam0, adapter):
        return _group_sum(lam0, lam0, adapter,
                          lambda b, k: gm.hamiltonian_element(b, k, M, U))

    return _ratio_assembly(se, beta, value)


def sym_density_profile(se: SymEnsemble, beta: float, x_points) -> np.ndarray:
    """rho(x) from the squared signed wavefunction sums; fermion sectors
    vanish identically at coincident particle coordinates."""
    xs = np.asarray(x_points, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    den_logs, den_signs = _partition_terms(se, beta)
    lden, _ = _signed_logsumexp(den_logs, den_signs)
    rows = []
    for run in se.runs.values():
        lp = math.log(run.adapter.prefactor) + 2.0 * math.log(run.adapter.c_side)
        for w, lam in _sector_states(run, beta):
            amp = np.zeros(xs.shape[0])
            for R, s in zip(run.adapter.rotations, run.adapter.signs):
                t = _transform_trusted(lam, R)
                d = xs - t.q
                amp += s * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, t.G, d))
            with np.errstate(divide="ignore"):
                rows.append(math.log(w) + 2.0 * lam.gamma + lp
                            + 2.0 * np.log(np.abs(amp)))
    stacked = np.stack(rows)
    finite = stacked > -np.inf
    out = np.zeros(xs.shape[0])
    for col in range(xs.shape[0]):
        vals = stacked[finite[:, col], col]
        if vals.size:
            out[col] = math.exp(float(_signed_logsumexp(vals, np.ones(vals.size))[0]) - lden)
    return out


@dataclass
class SymAssembly:
    Z: float
    expectations: dict
    density: np.ndarray


def sym_assemble(ensemble: SymEnsemble, adapters, beta: float,
                 observables=(), x_points=None) -> SymAssembly:
    """(Z, expectations, density) at one temperature, summing all propagated
    sectors; adapters must match the ensemble's."""
    if isinstance(adapters, SymmetryAdapter):
        adapters = [adapters]
    stored = [run.adapter for run in ensemble.runs.values()]
    if len(adapters) != len(stored) or any(
            a.sector != b.sector or a.kind != b.kind for a, b in zip(adapters, stored)):
        raise ValidationError("adapters do not match the propagated sectors")
    Z = sym_partition_function(ensemble, beta)
    expectations = {name: sym_expectation(ensemble, beta, A)
                    for name, A in observables}
    density = None
    if x_points is not None:
        density = sym_density_profile(ensemble, beta, x_points)
    return SymAssembly(Z, expectations, density)


def _sym_reg_taus(se: SymEnsemble):
    out = []
    for run in se.runs.values():
        for m in run.members:
            regs = [t for t, _, reg in m.trajectory.diagnostics.rhs_records if reg]
            out.append(min(regs) if regs else math.inf)
    return out


def sym_thermal_scan(se: SymEnsemble, temperatures, observables=(),
                     include_energy: bool = False) -> ThermalScan:
    """Sector-summed analogue of the plain thermal scan (descending kT)."""
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
    var_pairs = _variance_pairs(names, alphas, se.M.dim)

    Z = np.empty(len(kts))
    cols = {n: np.empty(len(kts)) for n in names}
    for i, _, _ in var_pairs:
        cols[f"var_x{i+1}"] = np.empty(len(kts))
    if include_energy:
        cols["energy"] = np.empty(len(kts))
    reg_taus = _sym_reg_taus(se)
    flags = np.zeros(len(kts), dtype=bool)
    for r, beta in enumerate(betas):
        Z[r] = sym_partition_function(se, beta)
        means = []
        for n, A in zip(names, obs):
            v = sym_expectation(se, beta, A)
            cols[n][r] = v
            means.append(v)
        for i, e1, e2 in var_pairs:
            cols[f"var_x{i+1}"][r] = means[e2] - means[e1] ** 2
        if include_energy:
            cols["energy"][r] = sym_energy(se, beta)
        flags[r] = any(t <= 0.5 * beta for t in reg_taus)
    return ThermalScan(kts, betas, Z, cols, flags)
