"""Closed-form Gaussian elements: overlaps, moments, kinetic/potential matrix
elements, and the variational Gram matrix and force vector.

Everything reduces to central moments of a product Gaussian.  A bra-ket pair
(or bra-ket-term triple, when a potential term carries its own Gaussian) is
combined into a single Gaussian with precision C = sum of factor precisions,
and polynomial prefactors are re-centered at its mean so that only mean-zero
moments are ever needed.  Mean-zero moments follow a two-term recursion in the
covariance and are memoized per product.

Derivatives with respect to the parameters (G upper triangle, q, gamma) are
obtained by inserting low-order polynomial factors on the bra side:

    d/d gamma'           -> 1
    d/d q'_i             -> [G'(x-q')]_i
    d/d G'_ii            -> -1/2 (x-q')_i^2
    d/d G'_ij  (i<j)     -> -(x-q')_i (x-q')_j   (single packed parameter)

which keeps the Gram/force evaluation in the same moment algebra.  The
self-pair case (bra = ket) additionally has closed-form blocks used on the
integration hot path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError, ValidationError
from .potential import MassMatrix, PolyGaussTerm, Potential, _as_vector

MultiIndex = tuple[int, ...]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianParam:
    """Unnormalized Gaussian exp{gamma - 1/2 (x-q)^T G (x-q)} with G > 0."""

    G: np.ndarray
    q: np.ndarray
    gamma: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        dim = q.shape[0]
        G = np.asarray(self.G, dtype=float)
        if G.ndim == 0:
            G = G.reshape(1, 1)
        if G.shape != (dim, dim):
            raise ValidationError(f"G has shape {G.shape}, expected ({dim},{dim})")
        if not np.allclose(G, G.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(G).max())):
            raise ValidationError("G must be symmetric")
        G = 0.5 * (G + G.T)
        try:
            cho_factor(G, lower=True)
        except np.linalg.LinAlgError:
            raise ValidationError("G must be positive definite") from None
        if not np.isfinite(self.gamma):
            raise ValidationError("gamma must be finite")
        G.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def with_gamma(self, gamma: float) -> "GaussianParam":
        return GaussianParam._trusted(self.G, self.q, float(gamma))

    @classmethod
    def _trusted(cls, G: np.ndarray, q: np.ndarray, gamma: float) -> "GaussianParam":
        """Skip validation for internally built parameters (integrator trial
        states; G symmetric by construction, PD checked downstream)."""
        self = object.__new__(cls)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "gamma", gamma)
        return self

    def __repr__(self):
        return f"GaussianParam(G={self.G.tolist()}, q={self.q.tolist()}, gamma={self.gamma})"


def wavefunction_values(lam: GaussianParam, xs: np.ndarray) -> np.ndarray:
    """<x|lam> on an (N, D) array of points (1D array accepted for D=1)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.shape[1] != lam.dim:
        raise ValidationError(f"points have dimension {xs.shape[1]}, state has {lam.dim}")
    d = xs - lam.q
    return np.exp(lam.gamma - 0.5 * np.einsum("ni,ij,nj->n", d, lam.G, d))


# --- parameter packing ------------------------------------------------------

def param_count(dim: int) -> int:
    return dim * (dim + 1) // 2 + dim + 1


def triu_pairs(dim: int) -> list[tuple[int, int]]:
    """Row-major upper-triangle index pairs, the packing order of G."""
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def pack(lam: GaussianParam) -> np.ndarray:
    dim = lam.dim
    out = np.empty(param_count(dim))
    for k, (i, j) in enumerate(triu_pairs(dim)):
        out[k] = lam.G[i, j]
    out[-dim - 1:-1] = lam.q
    out[-1] = lam.gamma
    return out


def unpack(vec: np.ndarray, dim: int) -> GaussianParam:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (param_count(dim),):
        raise ValidationError(f"parameter vector has shape {vec.shape}, "
                              f"expected ({param_count(dim)},)")
    G = np.empty((dim, dim))
    for k, (i, j) in enumerate(triu_pairs(dim)):
        G[i, j] = vec[k]
        G[j, i] = vec[k]
    return GaussianParam(G, vec[-dim - 1:-1], vec[-1])


def full_mask(dim: int) -> np.ndarray:
    return np.ones(param_count(dim), dtype=bool)


def diag_mask(dim: int) -> np.ndarray:
    """Mask freezing all off-diagonal G entries."""
    mask = np.ones(param_count(dim), dtype=bool)
    for k, (i, j) in enumerate(triu_pairs(dim)):
        if i != j:
            mask[k] = False
    return mask


def validate_mask(mask, dim: int) -> np.ndarray:
    if mask is None:
        return full_mask(dim)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (param_count(dim),):
        raise ValidationError(f"mask has shape {mask.shape}, expected ({param_count(dim)},)")
    if not mask[-1] or not mask[-dim - 1:-1].all():
        raise ValidationError("gamma and all center components must stay active")
    return mask


# --- sparse polynomials in one coordinate frame -----------------------------

def poly_mul(a: dict[MultiIndex, float], b: dict[MultiIndex, float]) -> dict[MultiIndex, float]:
    out: dict[MultiIndex, float] = {}
    for alpha, ca in a.items():
        for beta, cb in b.items():
            key = tuple(x + y for x, y in zip(alpha, beta))
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def poly_shift(poly: dict[MultiIndex, float], delta: np.ndarray) -> dict[MultiIndex, float]:
    """Re-center: coefficients of p(y + delta) given those of p(z)."""
    if not np.any(delta):
        return dict(poly)
    dim = len(delta)
    out: dict[MultiIndex, float] = {}
    for alpha, c in poly.items():
        # expand prod_i (y_i + d_i)^alpha_i one dimension at a time
        partial = {(): c}
        for i in range(dim):
            nxt: dict[tuple, float] = {}
            for prefix, pc in partial.items():
                for b in range(alpha[i] + 1):
                    coeff = pc * math.comb(alpha[i], b) * delta[i] ** (alpha[i] - b)
                    key = prefix + (b,)
                    nxt[key] = nxt.get(key, 0.0) + coeff
            partial = nxt
        for beta, pc in partial.items():
            out[beta] = out.get(beta, 0.0) + pc
    return out


# --- product Gaussians and their central moments ----------------------------

def central_moment(cov: np.ndarray, memo: dict, alpha: MultiIndex) -> float:
    """E[prod_i y_i^alpha_i] for mean-zero Gaussian y with covariance cov,
    by the two-term recursion E[y_i y^b] = sum_j cov_ij b_j E[y^(b - e_j)]."""
    cached = memo.get(alpha)
    if cached is not None:
        return cached
    if sum(alpha) % 2 == 1:
        memo[alpha] = 0.0
        return 0.0
    i = next(k for k, a in enumerate(alpha) if a > 0)
    beta = list(alpha)
    beta[i] -= 1
    val = 0.0
    for j, bj in enumerate(beta):
        if bj > 0 and cov[i, j] != 0.0:
            gamma = list(beta)
            gamma[j] -= 1
            val += cov[i, j] * bj * central_moment(cov, memo, tuple(gamma))
    memo[alpha] = val
    return val


def _fresh_memo(dim: int) -> dict:
    return {(0,) * dim: 1.0}


class ProductGaussian:
    """Product of Gaussian factors exp{-1/2 (x-c_i)^T A_i (x-c_i)} with an
    overall log prefactor; exposes its mean, covariance, normalization, and
    memoized mean-zero moments."""

    def __init__(self, factors, log_pref: float):
        A_list = [np.asarray(A, dtype=float) for A, _ in factors]
        c_list = [np.atleast_1d(np.asarray(c, dtype=float)) for _, c in factors]
        dim = c_list[0].shape[0]
        C = np.zeros((dim, dim))
        rhs = np.zeros(dim)
        for A, c in zip(A_list, c_list):
            C += A
            rhs += A @ c
        C = 0.5 * (C + C.T)
        try:
            cho = cho_factor(C, lower=True)
        except np.linalg.LinAlgError:
            raise NumericalError("combined precision matrix not positive definite") from None
        self.dim = dim
        self.mean = cho_solve(cho, rhs)
        self.cov = cho_solve(cho, np.eye(dim))
        self.cov = 0.5 * (self.cov + self.cov.T)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        # exponent deficit at the combined mean, written pairwise for stability:
        # 1/2 sum_{i<j} (c_i-c_j)^T A_i C^-1 A_j (c_i-c_j)
        deficit = 0.0
        for i in range(len(A_list)):
            for j in range(i + 1, len(A_list)):
                d = c_list[i] - c_list[j]
                if np.any(d):
                    deficit += 0.5 * float(d @ A_list[i] @ cho_solve(cho, A_list[j] @ d))
        self.log_norm = float(log_pref) + 0.5 * dim * _LOG_2PI - 0.5 * logdet - deficit
        self._moments = _fresh_memo(dim)

    def central_moment(self, alpha: MultiIndex) -> float:
        """E[prod_i y_i^alpha_i] for y ~ N(0, cov)."""
        return central_moment(self.cov, self._moments, alpha)

    def expect(self, poly: dict[MultiIndex, float]) -> float:
        """E[p(y)] for p centered at the product mean."""
        return float(sum(c * self.central_moment(alpha) for alpha, c in poly.items() if c != 0.0))

    def integral(self, poly: dict[MultiIndex, float]) -> float:
        """Integral of p(x - mean) times the product Gaussian."""
        return math.exp(self.log_norm) * self.expect(poly)


def _pair(bra: GaussianParam, ket: GaussianParam) -> ProductGaussian:
    if bra.dim != ket.dim:
        raise ValidationError(f"dimension mismatch: bra {bra.dim}, ket {ket.dim}")
    return ProductGaussian([(bra.G, bra.q), (ket.G, ket.q)], bra.gamma + ket.gamma)


# --- matrix elements --------------------------------------------------------

def overlap(bra: GaussianParam, ket: GaussianParam) -> float:
    return math.exp(_pair(bra, ket).log_norm)


def log_overlap(bra: GaussianParam, ket: GaussianParam) -> float:
    return _pair(bra, ket).log_norm


def moment(bra: GaussianParam, ket: GaussianParam, alpha) -> float:
    """<bra| prod_i x_i^alpha_i |ket>."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != bra.dim or any(a < 0 for a in alpha):
        raise ValidationError(f"bad multi-index {alpha} for dimension {bra.dim}")
    pg = _pair(bra, ket)
    return pg.integral(poly_shift({alpha: 1.0}, pg.mean))


def _kinetic_poly(ket: GaussianParam, M: MassMatrix) -> dict[MultiIndex, float]:
    """(-1/2 nabla^T M^-1 nabla) acting on the ket, as a polynomial in
    y = x - ket.q multiplying the ket Gaussian."""
    G = ket.G
    W = G @ M.inverse @ G
    dim = ket.dim
    poly: dict[MultiIndex, float] = {(0,) * dim: 0.5 * float(np.trace(M.inverse @ G))}
    for i in range(dim):
        for j in range(i, dim):
            alpha = [0] * dim
            alpha[i] += 1
            alpha[j] += 1
            poly[tuple(alpha)] = -0.5 * W[i, j] if i == j else -float(W[i, j])
    return poly


def kinetic_element(bra: GaussianParam, ket: GaussianParam, M: MassMatrix) -> float:
    """<bra| 1/2 p^T M^-1 p |ket>."""
    if M.dim != ket.dim:
        raise ValidationError(f"mass matrix dimension {M.dim} != state dimension {ket.dim}")
    pg = _pair(bra, ket)
    poly = poly_shift(_kinetic_poly(ket, M), pg.mean - ket.q)
    return pg.integral(poly)


def _term_products(bra: GaussianParam, ket: GaussianParam, U: Potential):
    """Split U into (merged zero-width polynomial, list of Gaussian-width
    pieces); each piece is (scalar coeff, ProductGaussian, poly at its mean)."""
    if U.dim != bra.dim:
        raise ValidationError(f"potential dimension {U.dim} != state dimension {bra.dim}")
    merged: dict[MultiIndex, float] = {}
    gauss_pieces = []
    for term in U.terms:
        if not term.has_gauss:
            for alpha, c in term.poly.items():
                merged[alpha] = merged.get(alpha, 0.0) + term.coeff * c
        else:
            pg = ProductGaussian(
                [(bra.G, bra.q), (ket.G, ket.q), (term.width, term.center)],
                bra.gamma + ket.gamma)
            gauss_pieces.append((term.coeff, pg, poly_shift(term.poly, pg.mean)))
    return merged, gauss_pieces


def potential_element(bra: GaussianParam, ket: GaussianParam, U: Potential) -> float:
    """<bra| U(x) |ket> for a polynomial-times-Gaussian potential."""
    merged, gauss_pieces = _term_products(bra, ket, U)
    val = 0.0
    if merged:
        pg = _pair(bra, ket)
        val += pg.integral(poly_shift(merged, pg.mean))
    for coeff, pg, poly in gauss_pieces:
        val += coeff * pg.integral(poly)
    return val


def observable_element(bra: GaussianParam, ket: GaussianParam, A: Potential) -> float:
    """<bra| A(x) |ket> for a position-space observable in potential form."""
    return potential_element(bra, ket, A)


def hamiltonian_element(bra: GaussianParam, ket: GaussianParam,
                        M: MassMatrix, U: Potential) -> float:
    return kinetic_element(bra, ket, M) + potential_element(bra, ket, U)


# --- derivative insertions --------------------------------------------------

def insertion_polys(lam: GaussianParam) -> list[dict[MultiIndex, float]]:
    """Per-parameter insertion polynomials in the variable x - lam.q, in
    packing order (G triangle, q, gamma)."""
    dim = lam.dim
    polys = []
    for i, j in triu_pairs(dim):
        alpha = [0] * dim
        alpha[i] += 1
        alpha[j] += 1
        polys.append({tuple(alpha): -0.5 if i == j else -1.0})
    for i in range(dim):
        p = {}
        for j in range(dim):
            if lam.G[i, j] != 0.0:
                alpha = [0] * dim
                alpha[j] = 1
                p[tuple(alpha)] = float(lam.G[i, j])
        polys.append(p)
    polys.append({(0,) * dim: 1.0})
    return polys


def _shifted_insertions(lam: GaussianParam, mean: np.ndarray):
    delta = mean - lam.q
    return [poly_shift(p, delta) for p in insertion_polys(lam)]


def insertion_overlap_matrix(bra: GaussianParam, ket: GaussianParam) -> np.ndarray:
    """Matrix of <d_k bra | d_l ket> over all parameter pairs: the cross-pair
    Gram building block (equals gram_matrix when bra is ket)."""
    pg = _pair(bra, ket)
    bra_ins = _shifted_insertions(bra, pg.mean)
    ket_ins = _shifted_insertions(ket, pg.mean)
    norm = math.exp(pg.log_norm)
    P = len(bra_ins)
    out = np.empty((P, P))
    for k in range(P):
        for l in range(P):
            out[k, l] = norm * pg.expect(poly_mul(bra_ins[k], ket_ins[l]))
    return out


def insertion_hamiltonian_vector(bra: GaussianParam, ket: GaussianParam,
                                 M: MassMatrix, U: Potential) -> np.ndarray:
    """Vector of <d_k bra | H | ket> over bra parameters."""
    pg = _pair(bra, ket)
    bra_ins = _shifted_insertions(bra, pg.mean)
    norm = math.exp(pg.log_norm)
    P = len(bra_ins)
    out = np.zeros(P)

    op_poly = poly_shift(_kinetic_poly(ket, M), pg.mean - ket.q)
    merged, gauss_pieces = _term_products(bra, ket, U)
    if merged:
        for alpha, c in poly_shift(merged, pg.mean).items():
            op_poly[alpha] = op_poly.get(alpha, 0.0) + c
    for k in range(P):
        out[k] = norm * pg.expect(poly_mul(bra_ins[k], op_poly))
    for coeff, pg_t, poly_t in gauss_pieces:
        norm_t = math.exp(pg_t.log_norm)
        ins_t = _shifted_insertions(bra, pg_t.mean)
        for k in range(P):
            out[k] += coeff * norm_t * pg_t.expect(poly_mul(ins_t[k], poly_t))
    return out


def insertion_blocks(bra: GaussianParam, ket: GaussianParam,
                     M: MassMatrix, U: Potential):
    """(insertion overlap matrix, insertion Hamiltonian vector) sharing one
    pair product and moment cache; used by symmetry-adapted equations of
    motion where both blocks are needed per group element."""
    pg = _pair(bra, ket)
    bra_ins = _shifted_insertions(bra, pg.mean)
    ket_ins = _shifted_insertions(ket, pg.mean)
    norm = math.exp(pg.log_norm)
    P = len(bra_ins)

    E = np.empty((P, P))
    for k in range(P):
        for l in range(P):
            E[k, l] = norm * pg.expect(poly_mul(bra_ins[k], ket_ins[l]))

    h = np.zeros(P)
    op_poly = poly_shift(_kinetic_poly(ket, M), pg.mean - ket.q)
    merged, gauss_pieces = _term_products(bra, ket, U)
    if merged:
        for alpha, c in poly_shift(merged, pg.mean).items():
            op_poly[alpha] = op_poly.get(alpha, 0.0) + c
    for k in range(P):
        h[k] = norm * pg.expect(poly_mul(bra_ins[k], op_poly))
    for coeff, pg_t, poly_t in gauss_pieces:
        norm_t = math.exp(pg_t.log_norm)
        ins_t = _shifted_insertions(bra, pg_t.mean)
        for k in range(P):
            h[k] += coeff * norm_t * pg_t.expect(poly_mul(ins_t[k], poly_t))
    return E, h


def _quad_insertions(lam: GaussianParam, mu: np.ndarray):
    """Insertions as quadratics c + b.y + 1/2 y.A.y in y = x - mu, packing
    order; A or b is None when identically zero."""
    dim = lam.dim
    delta = mu - lam.q
    out = []
    for i, j in triu_pairs(dim):
        w = 0.5 if i == j else 1.0
        A = np.zeros((dim, dim))
        A[i, j] -= w
        A[j, i] -= w
        b = np.zeros(dim)
        b[i] -= w * delta[j]
        b[j] -= w * delta[i]
        out.append((A, b, -w * delta[i] * delta[j]))
    Gd = lam.G @ delta
    for i in range(dim):
        out.append((None, lam.G[i].copy(), float(Gd[i])))
    out.append((None, None, 1.0))
    return out


def _wick_quad(bra_q, prep_b, op):
    """E[ins_k . op] for every bra insertion against one quadratic op; both
    sides quadratic, so fourth-order Wick contractions suffice."""
    (A2, b2, c2, S2, t2, sb2) = op
    tb, Sb = prep_b
    out = np.empty(len(bra_q))
    for k, (Ab, bb, cb) in enumerate(bra_q):
        v = cb * c2 + 0.5 * (cb * t2 + c2 * tb[k]) + 0.25 * tb[k] * t2
        if bb is not None and sb2 is not None:
            v += float(bb @ sb2)
        if Sb[k] is not None and S2 is not None:
            v += 0.5 * float(np.sum(Sb[k] * S2.T))
        out[k] = v
    return out


def _contract_moments(bra_q, m0, m1, m2, shift=None):
    """E[ins_k . p] from the moment blocks of p; optionally re-center the
    insertions to a product mean displaced by `shift`."""
    out = np.empty(len(bra_q))
    for k, (Ab, bb, cb) in enumerate(bra_q):
        c, b = cb, bb
        if shift is not None:
            if bb is not None:
                c = c + float(bb @ shift)
            if Ab is not None:
                c += 0.5 * float(shift @ Ab @ shift)
                b = (bb if bb is not None else 0.0) + Ab @ shift
        v = c * m0
        if b is not None:
            v += float(np.asarray(b) @ m1)
        if Ab is not None:
            v += 0.5 * float(np.sum(Ab * m2))
        out[k] = v
    return out


def pair_blocks(bra: GaussianParam, ket: GaussianParam,
                M: MassMatrix, U: Potential):
    """(insertion overlap matrix, insertion Hamiltonian vector) for a generic
    pair in closed form: insertions are quadratics in y = x - mean, overlap
    entries are fourth-order Wick contractions, and the potential enters
    through m0/m1/m2 moment blocks.  Much faster than the polynomial-table
    route; cross-checked against insertion_blocks in the tests."""
    pg = _pair(bra, ket)
    mu, cov = pg.mean, pg.cov
    norm = math.exp(pg.log_norm)
    dim = bra.dim
    bra_q = _quad_insertions(bra, mu)
    ket_q = _quad_insertions(ket, mu)
    P = len(bra_q)

    def prep(qs):
        ts, Ss = [], []
        for A, _, _ in qs:
            if A is None:
                ts.append(0.0)
                Ss.append(None)
            else:
                S = A @ cov
                Ss.append(S)
                ts.append(float(np.trace(S)))
        return ts, Ss

    tb, Sb = prep(bra_q)
    tk, Sk = prep(ket_q)
    sbk = [None if b is None else cov @ b for _, b, _ in ket_q]
    E = np.empty((P, P))
    for l, (Ak, bk, ck) in enumerate(ket_q):
        E[:, l] = _wick_quad(bra_q, (tb, Sb), (Ak, bk, ck, Sk[l], tk[l], sbk[l]))
    E *= norm

    W = ket.G @ M.inverse @ ket.G
    dk = mu - ket.q
    A_K = -W
    b_K = -(W @ dk)
    c_K = 0.5 * float(np.trace(M.inverse @ ket.G)) - 0.5 * float(dk @ W @ dk)
    S_K = A_K @ cov
    h = _wick_quad(bra_q, (tb, Sb),
                   (A_K, b_K, c_K, S_K, float(np.trace(S_K)), cov @ b_K))

    merged, gauss_pieces = _term_products(bra, ket, U)
    if merged:
        m0, m1, m2 = _poly_moments(poly_shift(merged, mu), cov,
                                   _fresh_memo(dim), dim)
        h += _contract_moments(bra_q, m0, m1, m2)
    h *= norm
    for coeff, pg_t, poly_t in gauss_pieces:
        norm_t = coeff * math.exp(pg_t.log_norm)
        m0, m1, m2 = _poly_moments(poly_t, pg_t.cov, _fresh_memo(dim), dim)
        h += norm_t * _contract_moments(bra_q, m0, m1, m2, shift=pg_t.mean - mu)
    return E, h


def _lower_closure(tops, dim: int):
    """All multi-indices componentwise below the given tops, sorted by total
    order so a recursion can fill them front to back."""
    seen = set()
    stack = list(tops)
    while stack:
        a = stack.pop()
        if a in seen:
            continue
        seen.add(a)
        for i in range(dim):
            if a[i] > 0:
                stack.append(a[:i] + (a[i] - 1,) + a[i + 1:])
    return sorted(seen, key=lambda a: (sum(a), a))


def make_pair_blocks(M: MassMatrix, U: Potential, dim: int):
    """Precompiled fn(bra, ket) -> (E, h) equal to pair_blocks.

    Precomputes the potential split, the constant quadratic parts of the
    insertion polynomials, and a straight-line program for the noncentral
    Gaussian moment table E[x^alpha], so the per-call work is a Cholesky
    factorization plus small vectorized contractions.  This is the hot path
    of the symmetry-adapted equations of motion.
    """
    if M.dim != dim or U.dim != dim:
        raise ValidationError("mass/potential dimension mismatch")
    pairs = triu_pairs(dim)
    nt = len(pairs)
    P = nt + dim + 1
    Minv = M.inverse
    merged_abs: dict[MultiIndex, float] = {}
    gauss_terms = []
    for term in U.terms:
        if not term.has_gauss:
            for alpha, c in term.poly.items():
                merged_abs[alpha] = merged_abs.get(alpha, 0.0) + term.coeff * c
        else:
            gauss_terms.append(term)

    # constant quadratic parts of the insertions, packing order
    A_stack = np.zeros((P, dim, dim))
    w_vec = np.empty(nt)
    ti = np.empty(nt, dtype=int)
    tj = np.empty(nt, dtype=int)
    for a, (i, j) in enumerate(pairs):
        w = 0.5 if i == j else 1.0
        A_stack[a, i, j] -= w
        A_stack[a, j, i] -= w
        w_vec[a], ti[a], tj[a] = w, i, j

    # moment-table program: alphas sorted by order, each filled from smaller ones
    units = [tuple(1 if k == i else 0 for k in range(dim)) for i in range(dim)]
    if merged_abs:
        support = [a for a, c in merged_abs.items() if c != 0.0]
        tops = [tuple(a + u + v for a, u, v in zip(alpha, units[i], units[j]))
                for alpha in support for i in range(dim) for j in range(dim)]
        alphas = _lower_closure(tops, dim)
        index = {a: k for k, a in enumerate(alphas)}
        program = []
        for a in alphas:
            if sum(a) == 0:
                continue
            i = next(d for d in range(dim) if a[d] > 0)
            beta = tuple(x - u for x, u in zip(a, units[i]))
            terms = [(i * dim + j, float(beta[j]),
                      index[tuple(x - u for x, u in zip(beta, units[j]))])
                     for j in range(dim) if beta[j] > 0]
            program.append((index[a], i, index[beta], terms))
        coeffs = np.array([merged_abs[a] for a in support])
        I0 = np.array([index[a] for a in support])
        I1 = np.array([[index[tuple(x + u for x, u in zip(a, units[i]))]
                        for i in range(dim)] for a in support])
        I2 = np.array([[[index[tuple(x + u + v for x, u, v in zip(a, units[i], units[j]))]
                         for j in range(dim)] for i in range(dim)] for a in support])
        n_table = len(alphas)
    else:
        program = None

    def side_quadratics(G, q, mu):
        """(b_stack, c_stack) for one side's insertions at displacement mu-q."""
        delta = mu - q
        B = np.zeros((P, dim))
        c = np.empty(P)
        wd_j = w_vec * delta[tj]
        wd_i = w_vec * delta[ti]
        for a in range(nt):
            B[a, ti[a]] -= wd_j[a]
            B[a, tj[a]] -= wd_i[a]
        c[:nt] = -wd_i * delta[tj]
        B[nt:nt + dim] = G
        c[nt:nt + dim] = G @ delta
        c[P - 1] = 1.0
        return B, c

    A2d = A_stack.reshape(P, dim * dim)

    def blocks(bra: GaussianParam, ket: GaussianParam):
        C = bra.G + ket.G
        try:
            cho = cho_factor(0.5 * (C + C.T), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("combined precision matrix not positive definite") from None
        cov = cho_solve(cho, np.eye(dim), check_finite=False)
        cov = 0.5 * (cov + cov.T)
        mu = cov @ (bra.G @ bra.q + ket.G @ ket.q)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        d = bra.q - ket.q
        deficit = 0.5 * float(d @ (bra.G @ (cov @ (ket.G @ d)))) if np.any(d) else 0.0
        norm = math.exp(bra.gamma + ket.gamma + 0.5 * dim * _LOG_2PI
                        - 0.5 * logdet - deficit)

        Bb, cb = side_quadratics(bra.G, bra.q, mu)
        Bk, ck = side_quadratics(ket.G, ket.q, mu)
        # traces and pairwise contractions of A_stack @ cov through flat
        # views; the quadratic insertion parts are side-independent, so one
        # product serves both bra and ket
        R = (A_stack @ cov).reshape(P, dim * dim)
        tr = R[:, ::dim + 1].sum(axis=1)
        RT = R.reshape(P, dim, dim).swapaxes(1, 2).reshape(P, dim * dim)
        cb2 = cb + 0.5 * tr
        ck2 = ck + 0.5 * tr
        E = norm * (np.outer(cb2, ck2) + Bb @ cov @ Bk.T + 0.5 * (R @ RT.T))

        W = ket.G @ Minv @ ket.G
        dk = mu - ket.q
        b_K = -(W @ dk)
        c_K = 0.5 * float(np.trace(Minv @ ket.G)) - 0.5 * float(dk @ W @ dk)
        S_K = -(W @ cov)
        t_K = float(S_K.trace())
        h = cb2 * (c_K + 0.5 * t_K) + Bb @ (cov @ b_K) + 0.5 * (R @ S_K.T.ravel())

        if program is not None:
            tbl = np.empty(n_table)
            tbl[0] = 1.0
            sig = cov.ravel()
            for t, i, s1, terms in program:
                v = mu[i] * tbl[s1]
                for pos, bj, s2 in terms:
                    v += sig[pos] * bj * tbl[s2]
                tbl[t] = v
            e0 = float(coeffs @ tbl[I0])
            e1 = coeffs @ tbl[I1]
            e2 = np.tensordot(coeffs, tbl[I2], axes=1)
            m1 = e1 - mu * e0
            m2 = e2 - np.outer(mu, e1) - np.outer(e1, mu) + np.outer(mu, mu) * e0
            h += cb * e0 + Bb @ m1 + 0.5 * (A2d @ m2.ravel())
        h *= norm

        for term in gauss_terms:
            pg_t = ProductGaussian(
                [(bra.G, bra.q), (ket.G, ket.q), (term.width, term.center)],
                bra.gamma + ket.gamma)
            poly_t = poly_shift(term.poly, pg_t.mean)
            m0t, m1t, m2t = _poly_moments(poly_t, pg_t.cov, _fresh_memo(dim), dim)
            norm_t = term.coeff * math.exp(pg_t.log_norm)
            bra_q = list(zip(A_stack, Bb, cb))
            bra_q = [(A if np.any(A) else None, b if np.any(b) else None, c)
                     for A, b, c in bra_q]
            h += norm_t * _contract_moments(bra_q, m0t, m1t, m2t,
                                            shift=pg_t.mean - mu)
        return E, h

    return blocks


# --- closed-form self-pair Gram and force (integration hot path) ------------

def _self_factor(G: np.ndarray, gamma: float, dim: int):
    """(S, Sigma) for the self product: S = <lam|lam>, Sigma = (2G)^-1."""
    try:
        cho = cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("width matrix not positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    S = math.exp(2.0 * gamma + 0.5 * dim * math.log(math.pi) - 0.5 * logdet)
    Ginv = cho_solve(cho, np.eye(dim))
    Sig = 0.25 * (Ginv + Ginv.T)
    return S, Sig


def _gram_full(G: np.ndarray, Sig: np.ndarray, pairs, dim: int) -> np.ndarray:
    """Self-pair Gram matrix divided by the overlap S, in packing order."""
    nt = len(pairs)
    P = nt + dim + 1
    out = np.zeros((P, P))
    for a in range(nt):
        i, j = pairs[a]
        wa = 0.5 if i == j else 1.0
        for b in range(a, nt):
            k, l = pairs[b]
            w = wa * (0.5 if k == l else 1.0)
            # E[t_Gij t_Gkl]: quartic Wick sum with the packing prefactors
            v = w * (Sig[i, j] * Sig[k, l]
                     + Sig[i, k] * Sig[j, l]
                     + Sig[i, l] * Sig[j, k])
            out[a, b] = v
            out[b, a] = v
        gcol = -wa * Sig[i, j]
        out[a, P - 1] = gcol
        out[P - 1, a] = gcol
    out[nt:nt + dim, nt:nt + dim] = 0.5 * G
    out[P - 1, P - 1] = 1.0
    return out


def _force_kinetic(G: np.ndarray, Sig: np.ndarray, Minv: np.ndarray,
                   pairs, dim: int) -> np.ndarray:
    """Kinetic force components divided by S: <t_k (c0 + y^T B y)>."""
    nt = len(pairs)
    P = nt + dim + 1
    out = np.zeros(P)
    c0 = 0.5 * float(np.sum(Minv * G))  # tr(M^-1 G), both symmetric
    B = -0.5 * G @ Minv @ G
    trBS = float(np.sum(B * Sig))
    SBS = Sig @ B @ Sig
    out[P - 1] = c0 + trBS
    for a in range(nt):
        i, j = pairs[a]
        w = 0.5 if i == j else 1.0
        out[a] = -w * (c0 * Sig[i, j] + Sig[i, j] * trBS + 2.0 * SBS[i, j])
    return out


def _poly_moments(poly: dict, cov: np.ndarray, memo: dict, dim: int):
    """(E[p], E[y_i p], E[y_i y_j p]) for mean-zero Gaussian y with the given
    covariance; m2 is returned symmetric-full."""
    m0 = 0.0
    m1 = np.zeros(dim)
    m2 = np.zeros((dim, dim))
    units = [tuple(1 if k == i else 0 for k in range(dim)) for i in range(dim)]
    for alpha, c in poly.items():
        if c == 0.0:
            continue
        m0 += c * central_moment(cov, memo, alpha)
        for i in range(dim):
            ai = tuple(a + u for a, u in zip(alpha, units[i]))
            mi = central_moment(cov, memo, ai)
            if mi != 0.0:
                m1[i] += c * mi
            for j in range(i, dim):
                aij = tuple(a + u for a, u in zip(ai, units[j]))
                mij = central_moment(cov, memo, aij)
                if mij != 0.0:
                    m2[i, j] += c * mij
                    if j > i:
                        m2[j, i] += c * mij
    return m0, m1, m2


def _force_polynomial(G: np.ndarray, q: np.ndarray, Sig: np.ndarray,
                      merged_abs: dict, pairs, dim: int) -> np.ndarray:
    """Polynomial-potential force components divided by S.

    Uses E[t_k p] = combinations of m0 = E[p], m1_i = E[y_i p],
    m2_ij = E[y_i y_j p] for p re-centered at q.
    """
    nt = len(pairs)
    P = nt + dim + 1
    out = np.zeros(P)
    m0, m1, m2 = _poly_moments(poly_shift(merged_abs, q), Sig, _fresh_memo(dim), dim)
    out[P - 1] = m0
    out[nt:nt + dim] = G @ m1
    for a in range(nt):
        i, j = pairs[a]
        out[a] = -0.5 * m2[i, j] if i == j else -m2[i, j]
    return out


def _force_gauss_terms(lam: GaussianParam, gauss_pieces, P: int) -> np.ndarray:
    out = np.zeros(P)
    for coeff, pg_t, poly_t in gauss_pieces:
        norm_t = math.exp(pg_t.log_norm)
        ins_t = _shifted_insertions(lam, pg_t.mean)
        for k in range(P):
            out[k] += coeff * norm_t * pg_t.expect(poly_mul(ins_t[k], poly_t))
    return out


def gram_matrix(lam: GaussianParam, mask=None) -> np.ndarray:
    """[d^2 K / d lam d lam']_{lam'=lam} on active parameters.

    Closed form via Wick contractions of the insertion polynomials with the
    self-product covariance Sigma = (2G)^-1.
    """
    dim = lam.dim
    mask = validate_mask(mask, dim)
    S, Sig = _self_factor(lam.G, lam.gamma, dim)
    out = S * _gram_full(lam.G, Sig, triu_pairs(dim), dim)
    idx = np.flatnonzero(mask)
    return out[np.ix_(idx, idx)]


def force_vector(lam: GaussianParam, M: MassMatrix, U: Potential, mask=None) -> np.ndarray:
    """[d H / d lam']_{lam'=lam} on active parameters."""
    dim = lam.dim
    mask = validate_mask(mask, dim)
    if M.dim != dim:
        raise ValidationError(f"mass matrix dimension {M.dim} != state dimension {dim}")
    S, Sig = _self_factor(lam.G, lam.gamma, dim)
    pairs = triu_pairs(dim)
    out = _force_kinetic(lam.G, Sig, M.inverse, pairs, dim)
    merged, gauss_pieces = _term_products(lam, lam, U)
    if merged:
        out += _force_polynomial(lam.G, lam.q, Sig, merged, pairs, dim)
    out *= S
    if gauss_pieces:
        out += _force_gauss_terms(lam, gauss_pieces, param_count(dim))
    return out[mask]


def make_gram_force(M: MassMatrix, U: Potential, dim: int, mask: np.ndarray):
    """Hot-path builder: returns fn(lam with gamma=0) -> (gram, force) on
    active parameters, sharing one factorization per call and precomputing
    everything that depends only on (M, U)."""
    if M.dim != dim or U.dim != dim:
        raise ValidationError("mass/potential dimension mismatch")
    pairs = triu_pairs(dim)
    idx = np.flatnonzero(mask)
    Minv = M.inverse
    merged_abs: dict[MultiIndex, float] = {}
    gauss_terms = []
    for term in U.terms:
        if not term.has_gauss:
            for alpha, c in term.poly.items():
                merged_abs[alpha] = merged_abs.get(alpha, 0.0) + term.coeff * c
        else:
            gauss_terms.append(term)
    sub = np.ix_(idx, idx)

    def gram_force(lam: GaussianParam):
        S, Sig = _self_factor(lam.G, 0.0, dim)
        gram = _gram_full(lam.G, Sig, pairs, dim)
        force = _force_kinetic(lam.G, Sig, Minv, pairs, dim)
        if merged_abs:
            force += _force_polynomial(lam.G, lam.q, Sig, merged_abs, pairs, dim)
        gram *= S
        force *= S
        if gauss_terms:
            pieces = []
            for term in gauss_terms:
                pg = ProductGaussian(
                    [(lam.G, lam.q), (lam.G, lam.q), (term.width, term.center)], 0.0)
                pieces.append((term.coeff, pg, poly_shift(term.poly, pg.mean)))
            force += _force_gauss_terms(lam, pieces, param_count(dim))
        return gram[sub], force[idx]

    return gram_force
