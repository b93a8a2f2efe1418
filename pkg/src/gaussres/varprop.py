"""Imaginary-time propagation of one Gaussian under the variational flow.

The equations of motion solve gram(lam) * lamdot = -force(lam) on the active
parameters.  Both sides scale identically with exp(2*gamma), so the right-hand
side is evaluated at gamma = 0; gamma itself still evolves through its own
derivative component.  Integration uses an implicit stiff stepper (the flow
has G ~ 1/tau near the delta-function start) with dense output, so one pass
serves every requested checkpoint.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import cho_factor, cho_solve

from . import gaussmath as gm
from .errors import (CheckpointError, GramSingularError, NumericalError,
                     SectorCollapseError, ValidationError, WidthCollapseError)
from .potential import MassMatrix, Potential, _as_vector


@dataclass(frozen=True)
class IntegratorConfig:
    tau0: float = 0.01
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    gram_regularization: float = 1e-10
    min_width: float = 1e-8

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ValidationError(f"tau0 must be positive, got {self.tau0}")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_step <= 0:
            raise ValidationError("max_step must be positive")
        if self.gram_regularization < 0:
            raise ValidationError("gram_regularization must be nonnegative")
        if self.min_width <= 0:
            raise ValidationError("min_width must be positive")


@dataclass
class TrajectoryDiagnostics:
    """Per-trajectory integration records."""

    accepted_taus: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rhs_records: list = field(default_factory=list)  # (tau, cond_estimate, regularized)
    n_reg_events: int = 0
    n_rejected_rhs: int = 0
    nfev: int = 0
    njev: int = 0
    nlu: int = 0

    def max_condition(self) -> float:
        if not self.rhs_records:
            return float("nan")
        return max(r[1] for r in self.rhs_records)


@dataclass
class Trajectory:
    """Checkpointed solution of the variational flow for one Gaussian."""

    checkpoints: list  # [(tau, GaussianParam)], tau strictly increasing
    diagnostics: TrajectoryDiagnostics
    mask: np.ndarray
    _base: np.ndarray = None
    _dense: object = None

    @property
    def dim(self) -> int:
        return self.checkpoints[0][1].dim

    @property
    def taus(self) -> np.ndarray:
        return np.array([t for t, _ in self.checkpoints])

    def lam_at(self, tau: float) -> gm.GaussianParam:
        """Checkpoint lookup; refuses to interpolate."""
        taus = self.taus
        idx = np.argmin(np.abs(taus - tau))
        if abs(taus[idx] - tau) > 1e-12 * max(1.0, abs(tau)):
            raise CheckpointError(
                f"tau={tau:g} is not a stored checkpoint (nearest: {taus[idx]:g})")
        return self.checkpoints[idx][1]

    def eval_dense(self, tau: float) -> gm.GaussianParam:
        """Continuous-time solution from the integrator's dense output."""
        t0, tend = self.checkpoints[0][0], self.checkpoints[-1][0]
        if not (t0 <= tau <= tend):
            raise CheckpointError(f"tau={tau:g} outside propagated range [{t0:g}, {tend:g}]")
        if tau == t0 or self._dense is None:
            return self.lam_at(t0) if tau == t0 else self.checkpoints[-1][1]
        full = self._base.copy()
        full[self.mask] = self._dense(tau)
        return gm.unpack(full, self.dim)


def init_delta(qn, M: MassMatrix, U: Potential, tau0: float) -> gm.GaussianParam:
    """Finite-width stand-in for a position delta function at small tau0:
    G = M/tau0, gamma = 1/2 ln(det M/(2 pi tau0)^D) - U(qn) tau0."""
    if tau0 <= 0:
        raise ValidationError(f"tau0 must be positive, got {tau0}")
    qn = _as_vector(qn, M.dim, "grid point")
    if U.dim != M.dim:
        raise ValidationError(f"potential dimension {U.dim} != mass dimension {M.dim}")
    G = M.matrix / tau0
    gamma = 0.5 * (M.logdet - M.dim * math.log(2.0 * math.pi * tau0)) - U(qn) * tau0
    return gm.GaussianParam(G, qn, gamma)


def solve_gram_system(gram: np.ndarray, rhs: np.ndarray, eps: float):
    """Solve gram @ x = rhs with Jacobi equilibration; Tikhonov-regularize by
    eps*diag(gram) when the condition estimate crosses 1/eps.

    Returns (x, condition_estimate, regularized).
    """
    diag0 = np.diag(gram)
    if not np.all(np.isfinite(diag0)) or np.max(diag0, initial=0.0) <= 0.0:
        raise GramSingularError("Gram matrix has no positive diagonal entries")
    # directions whose diagonal has numerically vanished (e.g. the center of
    # a state pinned at a symmetric point) are deflated: their update is zero
    live = diag0 > 1e-28 * np.max(diag0)
    if not np.all(live):
        sub = np.ix_(live, live)
        x_live, cond, regularized = solve_gram_system(gram[sub], rhs[live], eps)
        x = np.zeros(rhs.shape)
        x[live] = x_live
        return x, cond, True
    d = np.sqrt(diag0)
    scaled = gram / np.outer(d, d)
    threshold = 1.0 / eps if eps > 0 else math.inf
    cond = math.inf
    cho = None
    try:
        cho = cho_factor(scaled, lower=True)
        diag = np.diag(cho[0])
        cond = float((diag.max() / diag.min()) ** 2)
    except np.linalg.LinAlgError:
        cho = None
    regularized = False
    if cho is None or cond > threshold:
        if eps <= 0:
            raise GramSingularError("Gram factorization failed and regularization disabled")
        regularized = True
        try:
            cho = cho_factor(scaled + eps * np.eye(len(d)), lower=True)
        except np.linalg.LinAlgError:
            raise GramSingularError("Gram factorization failed after regularization") from None
    x = cho_solve(cho, rhs / d) / d
    return x, cond, regularized


def make_eom_solver(M: MassMatrix, U: Potential, mask: np.ndarray, eps: float, dim: int):
    """Build lam -> (active derivative, cond estimate, regularized) for the
    plain (unsymmetrized) flow."""
    gram_force = gm.make_gram_force(M, U, dim, mask)

    def solver(lam: gm.GaussianParam):
        lam0 = lam.with_gamma(0.0)  # both sides scale by e^{2 gamma}
        gram, force = gram_force(lam0)
        deriv, cond, reg = solve_gram_system(gram, -force, eps)
        return deriv, cond, reg

    return solver


def eom_rhs(lam: gm.GaussianParam, M: MassMatrix, U: Potential,
            mask=None, eps: float = 1e-10) -> np.ndarray:
    """Full-length parameter derivative (frozen entries zero)."""
    mask = gm.validate_mask(mask, lam.dim)
    deriv, _, _ = make_eom_solver(M, U, mask, eps, lam.dim)(lam)
    out = np.zeros(gm.param_count(lam.dim))
    out[mask] = deriv
    return out


def integrate_flow(lam0: gm.GaussianParam, tau0: float, tau_targets, mask,
                   config: IntegratorConfig, solver, label: str = "") -> Trajectory:
    """Shared integration core: any solver(lam) -> (active deriv, cond, reg)."""
    mask = gm.validate_mask(mask, lam0.dim)
    targets = [float(t) for t in tau_targets]
    if any(t < tau0 for t in targets):
        raise ValidationError("all checkpoint taus must be >= tau0")
    if sorted(targets) != targets:
        raise ValidationError("checkpoint taus must be ascending")
    targets = [t for t in targets if t > tau0]

    diags = TrajectoryDiagnostics()
    base = gm.pack(lam0)
    dim = lam0.dim
    nancount = [0]

    ntri = dim * (dim + 1) // 2

    def rhs(tau, y):
        full = base.copy()
        full[mask] = y
        lam = gm.GaussianParam._trusted(
            _g_from_packed(full, dim), full[ntri:ntri + dim], full[-1])
        try:
            deriv, cond, reg = solver(lam)
        except GramSingularError as exc:
            raise GramSingularError(
                f"{label}Gram system singular at tau={tau:g}: {exc}", tau=tau) from None
        except SectorCollapseError as exc:
            raise SectorCollapseError(
                f"{label}sector norm vanished at tau={tau:g}: {exc}", tau=tau) from None
        except NumericalError:
            # invalid trial state (width not PD): poison the step so the
            # integrator rejects and retries with a smaller step
            nancount[0] += 1
            return np.full(y.shape, np.nan)
        diags.rhs_records.append((tau, cond, reg))
        if reg:
            diags.n_reg_events += 1
        return deriv

    if not targets:
        traj = Trajectory([(tau0, lam0)], diags, mask, base.copy(), None)
        return traj

    def width_floor(tau, y):
        full = base.copy()
        full[mask] = y
        G = _g_from_packed(full, dim)
        return float(np.linalg.eigvalsh(G).min() - config.min_width)

    width_floor.terminal = True
    width_floor.direction = -1

    sol = solve_ivp(rhs, (tau0, targets[-1]), base[mask], method="Radau",
                    rtol=config.rel_tol, atol=config.abs_tol,
                    max_step=config.max_step, t_eval=np.asarray(targets),
                    dense_output=True, events=[width_floor])
    diags.nfev, diags.njev, diags.nlu = sol.nfev, sol.njev, sol.nlu
    diags.n_rejected_rhs = nancount[0]
    if sol.sol is not None:
        diags.accepted_taus = np.asarray(sol.sol.ts)
    if sol.status == 1:
        tau_ev = float(sol.t_events[0][0])
        raise WidthCollapseError(
            f"{label}Gaussian width too small (min eig G < {config.min_width:g}) "
            f"at tau={tau_ev:g}", tau=tau_ev)
    if sol.status != 0:
        tau_reached = float(sol.t[-1]) if sol.t.size else tau0
        raise NumericalError(
            f"{label}integration failed near tau={tau_reached:g}: {sol.message}")

    checkpoints = [(tau0, lam0)]
    for t, y in zip(sol.t, sol.y.T):
        full = base.copy()
        full[mask] = y
        try:
            lam = gm.unpack(full, dim)
        except ValidationError as exc:
            raise WidthCollapseError(
                f"{label}invalid width matrix at checkpoint tau={t:g}: {exc}",
                tau=float(t)) from None
        if np.linalg.eigvalsh(lam.G).min() < config.min_width:
            raise WidthCollapseError(
                f"{label}Gaussian width below floor at checkpoint tau={t:g}", tau=float(t))
        checkpoints.append((float(t), lam))
    return Trajectory(checkpoints, diags, mask, base.copy(), sol.sol)


def _g_from_packed(full: np.ndarray, dim: int) -> np.ndarray:
    G = np.empty((dim, dim))
    for k, (i, j) in enumerate(gm.triu_pairs(dim)):
        G[i, j] = full[k]
        G[j, i] = full[k]
    return G


def propagate(lam0: gm.GaussianParam, tau0: float, tau_targets, M: MassMatrix,
              U: Potential, mask=None, config: IntegratorConfig | None = None) -> Trajectory:
    """Integrate the variational flow from lam0 at tau0 through tau_targets."""
    config = config or IntegratorConfig(tau0=tau0)
    mask = gm.validate_mask(mask, lam0.dim)
    solver = make_eom_solver(M, U, mask, config.gram_regularization, lam0.dim)
    return integrate_flow(lam0, tau0, tau_targets, mask, config, solver)


def trajectory_csv(traj: Trajectory, path=None) -> str:
    """Diagnostic CSV: tau, gamma, center, G entries, running max condition."""
    dim = traj.dim
    cols = ["tau", "gamma"] + [f"q{i+1}" for i in range(dim)]
    cols += [f"G{i+1}{j+1}" for i, j in gm.triu_pairs(dim)]
    cols.append("gram_cond_max")
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    records = sorted(traj.diagnostics.rhs_records)
    ri = 0
    cond_max = float("nan")
    for tau, lam in traj.checkpoints:
        while ri < len(records) and records[ri][0] <= tau:
            c = records[ri][1]
            cond_max = c if math.isnan(cond_max) else max(cond_max, c)
            ri += 1
        row = [tau, lam.gamma] + list(lam.q) + [lam.G[i, j] for i, j in gm.triu_pairs(dim)]
        buf.write(",".join("%.17g" % v for v in row) + ",%.6g" % cond_max + "\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
