"""Reflection and permutation sectors: adapted matrix elements, sector flows,
Pauli drops, and the assembled thermal quantities."""

import math

import numpy as np
import pytest

import gaussres.ensemble as ens
import gaussres.gaussmath as gm
import gaussres.symmetry as sym
import gaussres.varprop as vp
from gaussres import (IntegratorConfig, MassMatrix, SectorCollapseError,
                      ValidationError, builtin)
from gaussres.potential import parse_potential

M1 = MassMatrix(np.eye(1))
M2 = MassMatrix(np.eye(2))
DW = builtin("double_well_1d")
TRAP2 = builtin("harmonic", omega=1.0, m=1.0, dim=2)

EVEN = sym.reflection_adapter(M1, DW, "even")
ODD = sym.reflection_adapter(M1, DW, "odd")
BOSON = sym.permutation_adapter(M2, TRAP2, 2, 1, "boson")
FERMION = sym.permutation_adapter(M2, TRAP2, 2, 1, "fermion")

X1 = parse_potential("1 * x1^1", 1)
X1SQ = parse_potential("1 * x1^2", 1)


def rand_param(rng, dim, spread=1.0):
    A = rng.normal(size=(dim, dim))
    G = A @ A.T + (0.3 + rng.uniform()) * np.eye(dim)
    q = rng.uniform(-spread, spread, size=dim)
    return gm.GaussianParam(G, q, rng.uniform(-0.5, 0.5))


@pytest.fixture(scope="module")
def dw_sym():
    """Both reflection sectors of the double well, good down to kT = 0.5."""
    grid = ens.GridSpec.equidistant([(-3.0, 3.0)], [10])
    return sym.propagate_sym(grid, M1, DW, [EVEN, ODD], 1.0, [0.25, 0.5, 1.0],
                             config=IntegratorConfig(tau0=0.01), n_workers=1)


def test_adapter_bookkeeping():
    assert EVEN.group_order == 2
    assert EVEN.norm_factor == pytest.approx(1.0, rel=1e-15)
    assert EVEN.prefactor == 0.5
    assert ODD.signs == (1.0, -1.0)
    np.testing.assert_array_equal(EVEN.rotations[0], np.eye(1))
    assert BOSON.group_order == 2
    assert BOSON.norm_factor == pytest.approx(2.0, rel=1e-15)
    assert BOSON.prefactor == 0.25
    M3 = MassMatrix(np.eye(3))
    trap3 = builtin("harmonic", omega=1.0, m=1.0, dim=3)
    three = sym.permutation_adapter(M3, trap3, 3, 1, "fermion")
    assert three.group_order == 6
    assert three.prefactor == pytest.approx(1.0 / 36.0, rel=1e-15)
    # identity and the two 3-cycles are even, the three swaps odd
    assert sorted(three.signs) == [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]


def test_reflection_overlap_closed_form():
    """For G = 1, gamma = 0 the sector norms are sqrt(pi) (1 +/- e^{-q^2})."""
    lam = gm.GaussianParam(np.eye(1), np.zeros(1), 0.0)
    assert sym.sym_element("overlap", lam, lam, EVEN) == pytest.approx(
        2.0 * math.sqrt(math.pi), rel=1e-14)
    assert sym.sym_element("overlap", lam, lam, ODD) == pytest.approx(0.0, abs=1e-15)

    q = 0.8
    off = gm.GaussianParam(np.eye(1), np.array([q]), 0.0)
    rp = math.sqrt(math.pi)
    assert sym.sym_element("overlap", off, off, EVEN) == pytest.approx(
        rp * (1.0 + math.exp(-q * q)), rel=1e-14)
    assert sym.sym_element("overlap", off, off, ODD) == pytest.approx(
        rp * (1.0 - math.exp(-q * q)), rel=1e-14)


def test_transform_involution_and_jacobian():
    rng = np.random.default_rng(21)
    th = 0.5236
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    lam = rand_param(rng, 2)
    back = sym.transform(sym.transform(lam, R), R.T)
    np.testing.assert_allclose(back.G, lam.G, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(back.q, lam.q, rtol=1e-13, atol=1e-14)
    assert back.gamma == lam.gamma

    # the parameter map is linear, so one central difference is exact up to
    # roundoff
    J = sym.transform_jacobian(R, 2)
    v = gm.pack(lam)
    h = 1e-3
    for col in range(v.size):
        va, vb = v.copy(), v.copy()
        va[col] += h
        vb[col] -= h
        dcol = (gm.pack(sym.transform(gm.unpack(va, 2), R))
                - gm.pack(sym.transform(gm.unpack(vb, 2), R))) / (2.0 * h)
        np.testing.assert_allclose(dcol, J[:, col], rtol=1e-10, atol=1e-10)


def test_group_sum_matches_double_sum():
    """Invariant operators reduce the bra-ket double sum to a single group
    sum times c^2 |G|; check the reduction against brute force."""
    rng = np.random.default_rng(77)
    for adapter, M, U in ((EVEN, M1, DW), (ODD, M1, DW),
                          (BOSON, M2, TRAP2), (FERMION, M2, TRAP2)):
        bra = rand_param(rng, adapter.dim)
        ket = rand_param(rng, adapter.dim)
        for kind in ("overlap", "hamiltonian"):
            if kind == "overlap":
                el = gm.overlap
            else:
                el = lambda b, k: gm.hamiltonian_element(b, k, M, U)
            total = 0.0
            for Rb, sb in zip(adapter.rotations, adapter.signs):
                tb = sym.transform(bra, Rb)
                for Rk, sk in zip(adapter.rotations, adapter.signs):
                    total += sb * sk * el(tb, sym.transform(ket, Rk))
            total *= adapter.c_side ** 2
            got = sym.sym_element(kind, bra, ket, adapter, M=M, U=U)
            assert got == pytest.approx(total, rel=1e-12, abs=1e-12)


def test_observable_element_routes():
    """x1^2 is invariant under both groups and must use the reduced sum; x1
    is not reflection-invariant and must fall back to the double sum."""
    rng = np.random.default_rng(3)
    bra, ket = rand_param(rng, 1), rand_param(rng, 1)
    for adapter in (EVEN, ODD):
        for A in (X1, X1SQ):
            total = 0.0
            for Rb, sb in zip(adapter.rotations, adapter.signs):
                tb = sym.transform(bra, Rb)
                for Rk, sk in zip(adapter.rotations, adapter.signs):
                    total += sb * sk * gm.observable_element(
                        tb, sym.transform(ket, Rk), A)
            total *= adapter.c_side ** 2
            got = sym.sym_element("observable", bra, ket, adapter, A=A)
            assert got == pytest.approx(total, rel=1e-12, abs=1e-13)


def test_pair_norm_matches_grid_quadrature():
    """Boson and fermion norms against midpoint quadrature of the squared
    signed wavefunction sum."""
    lam = gm.GaussianParam(np.array([[1.2, 0.3], [0.3, 0.9]]),
                           np.array([0.4, -0.7]), 0.1)
    n = 360
    axis = -7.0 + 14.0 / n * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    cell = (14.0 / n) ** 2
    for adapter in (BOSON, FERMION):
        psi = np.zeros(pts.shape[0])
        for R, s in zip(adapter.rotations, adapter.signs):
            psi += s * gm.wavefunction_values(sym.transform(lam, R), pts)
        psi *= adapter.c_side
        quad = float(np.sum(psi ** 2)) * cell
        got = sym.sym_element("overlap", lam, lam, adapter)
        assert got == pytest.approx(quad, rel=1e-8)


def test_even_flow_at_centered_state_matches_plain():
    """A centered Gaussian is a fixed point of the reflection, so the even
    sector G and gamma velocities must equal the plain ones.  The center is a
    redundant parameter right at the fixed point (d psi_even / dq vanishes
    identically), so its velocity is gauge and not compared."""
    lam = gm.GaussianParam(np.array([[0.8]]), np.zeros(1), -0.2)
    a = sym.sym_eom_rhs(lam, EVEN, M1, DW)
    b = vp.eom_rhs(lam, M1, DW)
    np.testing.assert_allclose(a[[0, 2]], b[[0, 2]], rtol=1e-9, atol=1e-11)
    assert abs(b[1]) < 1e-10


def _bump(v, j, dh):
    out = v.copy()
    out[j] += dh
    return out


def built_sector_blocks(lam0, adapter, M, U):
    """Sector Gram and force the way the solver assembles them: self blocks
    plus signed cross blocks chained through each transform Jacobian."""
    gram = gm.gram_matrix(lam0)
    force = gm.force_vector(lam0, M, U)
    for R, s, J in list(zip(adapter.rotations, adapter.signs,
                            adapter.jacobians))[1:]:
        E, hv = gm.insertion_blocks(lam0, sym.transform(lam0, R), M, U)
        gram = gram + s * (E @ J)
        force = force + s * hv
    return 0.5 * (gram + gram.T), force


def test_sector_blocks_match_finite_differences():
    """The sector Gram is the mixed bra-ket derivative of the reduced overlap
    sum and the force the bra derivative of the reduced Hamiltonian sum."""
    cases = [
        (EVEN, M1, DW, gm.GaussianParam(np.array([[0.9]]), np.array([0.6]), 0.0)),
        (ODD, M1, DW, gm.GaussianParam(np.array([[1.4]]), np.array([-0.8]), 0.0)),
        (FERMION, M2, TRAP2,
         gm.GaussianParam(np.array([[1.1, 0.2], [0.2, 0.8]]),
                          np.array([0.5, -0.4]), 0.0)),
    ]
    for adapter, M, U, lam in cases:
        dim = adapter.dim
        P = gm.param_count(dim)
        v = gm.pack(lam)

        def red_overlap(pb, pk):
            b, k = gm.unpack(pb, dim), gm.unpack(pk, dim)
            return sum(s * gm.overlap(b, sym.transform(k, R))
                       for R, s in zip(adapter.rotations, adapter.signs))

        def red_ham(pb, pk):
            b, k = gm.unpack(pb, dim), gm.unpack(pk, dim)
            return sum(s * gm.hamiltonian_element(b, sym.transform(k, R), M, U)
                       for R, s in zip(adapter.rotations, adapter.signs))

        gram, force = built_sector_blocks(lam, adapter, M, U)
        h = 5e-4
        scale = np.array([h * max(1.0, abs(x)) for x in v])
        for i in range(P):
            hi = scale[i]
            up, dn = v.copy(), v.copy()
            up[i] += hi
            dn[i] -= hi
            fd = (red_ham(up, v) - red_ham(dn, v)) / (2.0 * hi)
            assert force[i] == pytest.approx(fd, rel=5e-6, abs=5e-7)
            for j in range(P):
                hj = scale[j]
                fd = (red_overlap(up, _bump(v, j, hj))
                      - red_overlap(up, _bump(v, j, -hj))
                      - red_overlap(dn, _bump(v, j, hj))
                      + red_overlap(dn, _bump(v, j, -hj))) / (4.0 * hi * hj)
                assert gram[i, j] == pytest.approx(fd, rel=5e-6, abs=5e-7)


def test_sector_rhs_solves_the_built_system():
    """sym_eom_rhs must solve the assembled sector system; gamma shifts only
    rescale both sides, so the velocities cannot depend on it."""
    cases = [
        (EVEN, M1, DW, gm.GaussianParam(np.array([[0.9]]), np.array([0.6]), -0.3)),
        (BOSON, M2, TRAP2,
         gm.GaussianParam(np.array([[1.1, 0.2], [0.2, 0.8]]),
                          np.array([0.5, -0.4]), 0.15)),
        (FERMION, M2, TRAP2,
         gm.GaussianParam(np.array([[1.1, 0.2], [0.2, 0.8]]),
                          np.array([0.5, -0.4]), 0.15)),
    ]
    for adapter, M, U, lam in cases:
        gram, force = built_sector_blocks(lam.with_gamma(0.0), adapter, M, U)
        want = np.linalg.solve(gram, -force)
        got = sym.sym_eom_rhs(lam, adapter, M, U)
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)
        shifted = sym.sym_eom_rhs(lam.with_gamma(0.9), adapter, M, U)
        np.testing.assert_allclose(shifted, got, rtol=1e-9, atol=1e-12)


def test_sector_completeness_at_initial_time():
    """With all sectors still sharing the initial states, the prefactor-
    weighted sector sum reproduces the plain partition function."""
    cfg = IntegratorConfig(tau0=0.01)
    beta = 0.02  # tau = tau0: the flows have not yet separated

    grid = ens.GridSpec.equidistant([(-3.0, 3.0)], [6])
    se = sym.propagate_sym(grid, M1, DW, [EVEN, ODD], 0.02, [0.02],
                           config=cfg, n_workers=1)
    e = ens.propagate_ensemble(grid, M1, DW, 0.02, [0.02],
                               config=cfg, n_workers=1)
    assert sym.sym_partition_function(se, beta) == pytest.approx(
        ens.partition_function(e, beta), rel=1e-12)

    # permutation version; the two coincident centers drop out of the fermion
    # sector with exactly zero weight, which must not break the identity
    grid2 = ens.GridSpec.equidistant([(-2.0, 2.0), (-2.0, 2.0)], [2, 2])
    se2 = sym.propagate_sym(grid2, M2, TRAP2, [BOSON, FERMION], 0.02, [0.02],
                            config=cfg, n_workers=1)
    e2 = ens.propagate_ensemble(grid2, M2, TRAP2, 0.02, [0.02],
                                config=cfg, n_workers=1)
    assert len(se2.runs["fermion"].dropped) == 2
    assert sym.sym_partition_function(se2, beta) == pytest.approx(
        ens.partition_function(e2, beta), rel=1e-12)


def test_sector_sum_tracks_plain_at_high_temperature():
    """Once propagated the sector flows differ from the plain one, but at
    kT = 10 the assembled sum must still agree closely."""
    cfg = IntegratorConfig(tau0=0.01)
    grid = ens.GridSpec.equidistant([(-3.0, 3.0)], [14])
    se = sym.propagate_sym(grid, M1, DW, [EVEN, ODD], 0.05, [0.05],
                           config=cfg, n_workers=1)
    e = ens.propagate_ensemble(grid, M1, DW, 0.05, [0.05],
                               config=cfg, n_workers=1)
    beta = 0.1
    assert sym.sym_partition_function(se, beta) == pytest.approx(
        ens.partition_function(e, beta), rel=1e-2)
    assert sym.sym_energy(se, beta) == pytest.approx(
        ens.energy_expectation(e, beta, M1, DW), rel=1e-2)


def test_reflection_sectors_have_zero_mean_position(dw_sym):
    for beta in (0.5, 1.0, 2.0):
        assert sym.sym_expectation(dw_sym, beta, X1) == pytest.approx(0.0, abs=1e-12)
        assert sym.sym_expectation(dw_sym, beta, X1SQ) > 1.0


def test_sym_density_parity_and_normalization(dw_sym):
    half = np.linspace(0.0, 4.0, 161)
    xs = np.concatenate([-half[:0:-1], half])
    rho = sym.sym_density_profile(dw_sym, 2.0, xs)
    assert np.all(rho >= 0.0)
    np.testing.assert_allclose(rho, rho[::-1], rtol=1e-12)
    assert np.trapezoid(rho, xs) == pytest.approx(1.0, abs=1e-4)
    # mass should sit in the wells at +/- sqrt(2), not at the barrier
    mid = xs.size // 2
    assert rho[mid] < 0.8 * np.max(rho)


def test_sym_thermal_scan_table(dw_sym):
    scan = sym.sym_thermal_scan(dw_sym, (2.0, 1.0, 0.5),
                                observables=[("x1", X1), ("x1sq", X1SQ)],
                                include_energy=True)
    assert list(scan.columns) == ["x1", "x1sq", "var_x1", "energy"]
    np.testing.assert_allclose(scan.columns["var_x1"],
                               scan.columns["x1sq"] - scan.columns["x1"] ** 2,
                               rtol=1e-12, atol=1e-14)
    assert np.all(np.diff(scan.Z) < 0)
    assert np.all(np.diff(scan.columns["energy"]) < 0)
    # ground state of this double well sits near 1.8, so the energy column
    # must stay above it
    assert np.all(scan.columns["energy"] > 1.8)
    with pytest.raises(ValidationError):
        sym.sym_thermal_scan(dw_sym, (0.5, 1.0))
    single = sym.sym_partition_function(dw_sym, 1.0)
    assert scan.Z[1] == pytest.approx(single, rel=1e-13)


def test_fermion_coincident_member_is_dropped():
    cfg = IntegratorConfig(tau0=0.01)
    lam = vp.init_delta([0.7, 0.7], M2, TRAP2, cfg.tau0)
    assert sym.sector_norm_ratio(lam, FERMION) == 0.0
    assert sym.sector_norm_ratio(lam, BOSON) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(SectorCollapseError):
        sym.sym_eom_rhs(lam, FERMION, M2, TRAP2)

    grid = ens.GridSpec.explicit([[0.7, 0.7], [0.4, -0.6]], [1.0, 1.0])
    se = sym.propagate_sym(grid, M2, TRAP2, FERMION, 0.2, [0.2],
                           config=cfg, n_workers=1)
    run = se.runs["fermion"]
    assert len(run.members) == 1
    assert len(run.dropped) == 1
    np.testing.assert_array_equal(run.dropped[0][0], [0.7, 0.7])
    assert "sector norm ratio" in run.dropped[0][2]


def test_pinned_boson_member_follows_plain_flow():
    """A coincident pair is fixed by the exchange, so its boson-sector flow
    reduces to the plain flow; the member must match the plain trajectory
    and stay exactly on the coincident submanifold."""
    cfg = IntegratorConfig(tau0=0.01)
    grid = ens.GridSpec.explicit([[1.0, 1.0]], [1.0])
    se = sym.propagate_sym(grid, M2, TRAP2, BOSON, 1.0, [0.5, 1.0],
                           config=cfg, n_workers=1)
    lam = se.runs["boson"].members[0].trajectory.lam_at(1.0)
    assert lam.q[0] == lam.q[1]
    assert lam.G[0, 0] == lam.G[1, 1]
    lam0 = vp.init_delta([1.0, 1.0], M2, TRAP2, cfg.tau0)
    plain = vp.propagate(lam0, cfg.tau0, [0.5, 1.0], M2, TRAP2,
                         config=cfg).lam_at(1.0)
    np.testing.assert_array_equal(lam.G, plain.G)
    np.testing.assert_array_equal(lam.q, plain.q)
    assert lam.gamma == plain.gamma


def test_particle_relabeling_invariance():
    """Swapping the particle labels of a grid center relabels the whole
    trajectory, so assembled quantities cannot change."""
    cfg = IntegratorConfig(tau0=0.01)
    results = []
    for center in ([0.5, -0.3], [-0.3, 0.5]):
        grid = ens.GridSpec.explicit([center], [1.0])
        se = sym.propagate_sym(grid, M2, TRAP2, [BOSON, FERMION], 0.5, [0.5],
                               config=cfg, n_workers=1)
        results.append((sym.sym_partition_function(se, 1.0),
                        sym.sym_energy(se, 1.0)))
    assert results[0][0] == pytest.approx(results[1][0], rel=1e-10)
    assert results[0][1] == pytest.approx(results[1][1], rel=1e-10)


def test_symmetry_validation_rejects_mismatches():
    tilted = parse_potential("1 * x1^2\n0.1 * x1^1", 1)
    with pytest.raises(ValidationError):
        sym.reflection_adapter(M1, tilted, "even")
    with pytest.raises(ValidationError):
        sym.reflection_adapter(M1, DW, "both")
    with pytest.raises(ValidationError):
        sym.permutation_adapter(MassMatrix(np.diag([1.0, 2.0])), TRAP2,
                                2, 1, "boson")
    with pytest.raises(ValidationError):
        sym.permutation_adapter(M2, TRAP2, 2, 1, "anyon")
    with pytest.raises(ValidationError):
        sym.permutation_adapter(M2, TRAP2, 1, 2, "boson")
    lopsided = parse_potential("1 * x1^2\n1 * x2^4", 2)
    with pytest.raises(ValidationError):
        sym.permutation_adapter(M2, lopsided, 2, 1, "boson")
    lam1 = gm.GaussianParam(np.eye(1), np.zeros(1), 0.0)
    with pytest.raises(ValidationError):
        sym.sym_element("overlap", lam1, lam1, BOSON)
    grid = ens.GridSpec.equidistant([(-1.0, 1.0)], [2])
    with pytest.raises(ValidationError):
        sym.propagate_sym(grid, M1, DW, [], 0.1, [0.1])
    with pytest.raises(ValidationError):
        sym.propagate_sym(grid, M1, DW, [EVEN, EVEN], 0.1, [0.1])


def test_assemble_checks_adapters(dw_sym):
    with pytest.raises(ValidationError):
        sym.sym_assemble(dw_sym, [EVEN], 1.0)
    out = sym.sym_assemble(dw_sym, [EVEN, ODD], 1.0,
                           observables=[("x1sq", X1SQ)],
                           x_points=np.linspace(-3.0, 3.0, 11))
    assert out.Z == pytest.approx(sym.sym_partition_function(dw_sym, 1.0), rel=1e-13)
    assert out.density.shape == (11,)
    assert out.expectations["x1sq"] == pytest.approx(
        sym.sym_expectation(dw_sym, 1.0, X1SQ), rel=1e-12)
