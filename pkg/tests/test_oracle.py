"""Reference engines: grid diagonalization, classical Boltzmann quadrature,
and closed-form harmonic thermodynamics.

The frozen eigenvalues below were pinned by grid refinement: doubling the
point count moves them by under 1e-11, so the stated tolerances are dominated
by round-off rather than discretization.
"""

import math

import numpy as np
import pytest

import gaussres.oracle as orc
from gaussres import MassMatrix, NumericalError, ValidationError, builtin
from gaussres.potential import parse_potential

M1 = MassMatrix(np.eye(1))
M2 = MassMatrix(np.eye(2))
HARM = builtin("harmonic", omega=1.0, m=1.0, dim=1)
TRAP2 = builtin("harmonic", omega=1.0, m=1.0, dim=2)
SW = builtin("single_well_1d")
DW = builtin("double_well_1d")
X1 = parse_potential("1 * x1^1", 1)
X1SQ = parse_potential("1 * x1^2", 1)


def test_harmonic_spectrum_matches_ladder():
    spec = orc.ed_solve(HARM, M1, orc.EDConfig.make((-9.0, 9.0), 128, n_states=20))
    np.testing.assert_allclose(spec.energies, np.arange(20) + 0.5,
                               rtol=0.0, atol=1e-9)


def test_harmonic_thermal_matches_closed_form():
    spec = orc.ed_solve(HARM, M1, orc.EDConfig.make((-10.0, 10.0), 160))
    for kt in (0.1, 0.5, 1.0, 2.0):
        beta = 1.0 / kt
        ref = orc.harmonic_analytic(1.0, 1.0, beta)
        Z, x2, rho = orc.ed_thermal(spec, beta, X1SQ)
        assert Z == pytest.approx(ref.Z, rel=1e-8)
        assert x2 == pytest.approx(ref.x2, rel=1e-8)
        np.testing.assert_allclose(rho, ref.rho(spec.axes[0]), atol=1e-9)
        assert orc.ed_energy(spec, beta) == pytest.approx(
            0.5 / math.tanh(0.5 * beta), rel=1e-8)


def test_harmonic_thermal_hot_needs_a_big_box():
    # at kT=10 the thermal cloud has sigma ~ 3.2 but the contributing *states*
    # reach E ~ 200, whose turning points sit near x = 20
    spec = orc.ed_solve(HARM, M1, orc.EDConfig.make((-26.0, 26.0), 512))
    for kt in (5.0, 10.0):
        beta = 1.0 / kt
        ref = orc.harmonic_analytic(1.0, 1.0, beta)
        Z, x2, _ = orc.ed_thermal(spec, beta, X1SQ)
        assert Z == pytest.approx(ref.Z, rel=1e-12)
        assert x2 == pytest.approx(ref.x2, rel=1e-12)


def test_double_well_frozen_levels():
    spec = orc.ed_solve(DW, M1, orc.EDConfig.make((-5.0, 5.0), 128, n_states=6))
    assert spec.energies[0] == pytest.approx(1.8008134946205, abs=1e-10)
    assert spec.energies[1] - spec.energies[0] == pytest.approx(
        0.0956918877127, abs=1e-10)
    # self-convergence: doubling the grid must not move the levels
    fine = orc.ed_solve(DW, M1, orc.EDConfig.make((-5.0, 5.0), 256, n_states=6))
    np.testing.assert_allclose(fine.energies, spec.energies, rtol=0.0, atol=1e-10)


def test_single_well_frozen_levels():
    spec = orc.ed_solve(SW, M1, orc.EDConfig.make((-7.0, 7.0), 128, n_states=4))
    assert spec.energies[0] == pytest.approx(0.5591463271835, abs=1e-10)
    assert spec.energies[1] == pytest.approx(1.7695026439491, abs=1e-10)


def test_asym_well_2d_frozen_levels():
    spec = orc.ed_solve(builtin("asym_double_well_2d"), M2,
                        orc.EDConfig.make([(-4.5, 4.5), (-7.0, 7.0)], (48, 64),
                                          n_states=8))
    assert spec.energies[0] == pytest.approx(2.3553272163544, abs=1e-9)
    assert spec.energies[1] == pytest.approx(2.6166898937908, abs=1e-9)
    assert np.all(np.diff(spec.energies) >= 0.0)


def _trap_pair_reference(beta, kind):
    """Z and <E> for two unit-trap particles from the occupation sums
    n1 <= n2 (boson) or n1 < n2 (fermion), E = n1 + n2 + 1."""
    n = np.arange(0, 200)
    e = n[:, None] + n[None, :] + 1.0
    keep = n[:, None] <= n[None, :] if kind == "boson" else n[:, None] < n[None, :]
    w = np.exp(-beta * e[keep])
    return float(w.sum()), float(np.sum(e[keep] * w) / w.sum())


def test_sector_thermal_matches_occupation_sums():
    ground = {"boson": 1.0, "fermion": 2.0}
    for kind in ("boson", "fermion"):
        spec = orc.ed_solve(TRAP2, M2,
                            orc.EDConfig.make([(-7.0, 7.0)] * 2, [48, 48]),
                            symmetrize=kind)
        assert spec.energies[0] == pytest.approx(ground[kind], abs=1e-10)
        for kt in (0.5, 1.0):
            beta = 1.0 / kt
            z_ref, e_ref = _trap_pair_reference(beta, kind)
            Z, _, rho = orc.ed_thermal(spec, beta)
            assert Z == pytest.approx(z_ref, rel=2e-8)
            assert orc.ed_energy(spec, beta) == pytest.approx(e_ref, rel=2e-8)
            cell_sum = float(np.sum(rho)) * spec.cell
            assert cell_sum == pytest.approx(1.0, rel=1e-10)
            if kind == "fermion":
                # antisymmetric states vanish identically at x1 = x2
                diag = np.diagonal(rho.reshape(48, 48))
                assert np.max(np.abs(diag)) == 0.0


def test_sector_solve_on_a_small_grid():
    """Regression: the clustered top of the pair spectrum used to trip the
    orthonormality guard when the basis was small enough to be checked in
    full (the evr eigensolver orthogonalizes clusters only to ~1e-10)."""
    spec = orc.ed_solve(TRAP2, M2,
                        orc.EDConfig.make([(-7.0, 7.0)] * 2, [32, 32]),
                        symmetrize="fermion")
    assert spec.energies[0] == pytest.approx(2.0, abs=1e-10)
    assert len(spec.energies) == 32 * 31 // 2


def test_spectrum_truncation_guard():
    spec = orc.ed_solve(HARM, M1, orc.EDConfig.make((-9.0, 9.0), 128, n_states=3))
    with pytest.raises(NumericalError, match="retain more states"):
        orc.ed_thermal(spec, 0.1, X1SQ)


def test_energy_cutoff_keeps_low_states():
    spec = orc.ed_solve(HARM, M1,
                        orc.EDConfig.make((-9.0, 9.0), 128, energy_cutoff=5.2))
    assert len(spec.energies) == 5
    assert np.all(spec.energies < 5.2)


def test_ed_scan_matches_pointwise_calls():
    spec = orc.ed_solve(SW, M1, orc.EDConfig.make((-7.0, 7.0), 160))
    scan = orc.ed_thermal_scan(spec, (2.0, 1.0, 0.5),
                               [("x1", X1), ("x1sq", X1SQ)], include_energy=True)
    assert list(scan.columns) == ["x1", "x1sq", "var_x1", "energy"]
    assert not scan.reg_flags.any()
    for i, kt in enumerate((2.0, 1.0, 0.5)):
        beta = 1.0 / kt
        Z, x2, _ = orc.ed_thermal(spec, beta, X1SQ)
        assert scan.Z[i] == pytest.approx(Z, rel=1e-12)
        assert scan.columns["x1sq"][i] == pytest.approx(x2, rel=1e-12)
        assert scan.columns["energy"][i] == pytest.approx(
            orc.ed_energy(spec, beta), rel=1e-12)
    var = scan.columns["x1sq"] - scan.columns["x1"] ** 2
    np.testing.assert_allclose(scan.columns["var_x1"], var, rtol=1e-12)


def test_classical_equipartition_is_exact():
    box = [(-40.0, 40.0)]
    for kt in (0.25, 1.0):
        beta = 1.0 / kt
        assert orc.classical_partition(HARM, M1, beta, box) == pytest.approx(
            kt, rel=1e-12)
        assert orc.classical_thermal(HARM, M1, beta, X1SQ, box) == pytest.approx(
            kt, rel=1e-12)


def test_classical_scan_harmonic_columns():
    scan = orc.classical_thermal_scan(HARM, M1, (4.0, 1.0, 0.25),
                                      [("x1sq", X1SQ)], [(-40.0, 40.0)],
                                      include_energy=True)
    kts = np.array([4.0, 1.0, 0.25])
    np.testing.assert_allclose(scan.Z, kts, rtol=1e-10)
    np.testing.assert_allclose(scan.columns["x1sq"], kts, rtol=1e-10)
    # equipartition: kT/2 kinetic plus kT/2 potential
    np.testing.assert_allclose(scan.columns["energy"], kts, rtol=1e-10)
    assert not scan.reg_flags.any()


def test_classical_separable_dimensions_factor():
    u2 = parse_potential("0.5 * x1^2\n0.1 * x1^4\n0.5 * x2^2\n0.1 * x2^4", 2)
    a1 = orc.classical_thermal(SW, M1, 1.0, X1SQ, [(-6.0, 6.0)])
    a2 = orc.classical_thermal(u2, M2, 1.0, parse_potential("1 * x1^2", 2),
                               [(-6.0, 6.0)] * 2)
    assert a2 == pytest.approx(a1, rel=1e-10)


def test_classical_quantum_gap_narrows_with_temperature():
    spec = orc.ed_solve(SW, M1, orc.EDConfig.make((-7.0, 7.0), 160))
    kts = (4.0, 1.0, 0.25)
    e_cl = orc.classical_thermal_scan(SW, M1, kts, [], [(-9.0, 9.0)],
                                      include_energy=True).columns["energy"]
    e_q = orc.ed_thermal_scan(spec, kts, [], include_energy=True).columns["energy"]
    gaps = np.abs(e_q - e_cl)
    assert np.all(np.diff(gaps) > 0.0)
    assert gaps[0] / e_q[0] < 0.02


def test_box_tail_guard():
    with pytest.raises(ValidationError, match="enlarge the box"):
        orc.classical_thermal(HARM, M1, 0.1, X1SQ, [(-2.0, 2.0)])


def test_validation_rejects_bad_setups():
    with pytest.raises(ValidationError, match="at least 8 grid points"):
        orc.EDConfig.make((-5.0, 5.0), 6)
    with pytest.raises(ValidationError, match="1 or 2 dimensions"):
        orc.EDConfig.make([(-5.0, 5.0)] * 3, [16] * 3)
    with pytest.raises(ValidationError, match="empty box"):
        orc.EDConfig.make((5.0, -5.0), 32)
    with pytest.raises(ValidationError, match="n_states must be positive"):
        orc.EDConfig.make((-5.0, 5.0), 32, n_states=0)
    cfg2 = orc.EDConfig.make([(-5.0, 5.0)] * 2, [16, 16])
    with pytest.raises(ValidationError, match="diagonal mass"):
        orc.ed_solve(TRAP2, MassMatrix(np.array([[1.0, 0.2], [0.2, 1.0]])), cfg2)
    with pytest.raises(ValidationError, match="dimension does not match"):
        orc.ed_solve(HARM, M2, orc.EDConfig.make((-5.0, 5.0), 32))
    with pytest.raises(ValidationError, match="two identical 1D particles"):
        orc.ed_solve(HARM, M1, orc.EDConfig.make((-5.0, 5.0), 32),
                     symmetrize="boson")
    with pytest.raises(ValidationError, match="two identical 1D particles"):
        orc.ed_solve(TRAP2, M2, orc.EDConfig.make([(-5.0, 5.0)] * 2, [16, 24]),
                     symmetrize="boson")
    with pytest.raises(ValidationError, match="two identical 1D particles"):
        orc.ed_solve(TRAP2, MassMatrix(np.diag([1.0, 2.0])), cfg2,
                     symmetrize="boson")
    with pytest.raises(ValidationError, match="not exchange symmetric"):
        orc.ed_solve(parse_potential("0.5 * x1^2\n1.0 * x2^2", 2), M2, cfg2,
                     symmetrize="boson")
    with pytest.raises(ValidationError, match="boson.*fermion|fermion.*boson"):
        orc.ed_solve(TRAP2, M2, cfg2, symmetrize="anyon")
    with pytest.raises(ValidationError, match="excludes the whole spectrum"):
        orc.ed_solve(HARM, M1,
                     orc.EDConfig.make((-5.0, 5.0), 32, energy_cutoff=0.1))
    with pytest.raises(ValidationError, match="must all be positive"):
        orc.harmonic_analytic(-1.0, 1.0, 1.0)
    spec = orc.ed_solve(HARM, M1, orc.EDConfig.make((-9.0, 9.0), 64))
    with pytest.raises(ValidationError, match="strictly descending"):
        orc.ed_thermal_scan(spec, (1.0, 2.0), [])
    with pytest.raises(ValidationError, match="duplicate observable names"):
        orc.classical_thermal_scan(HARM, M1, (1.0,), [("a", X1), ("a", X1SQ)],
                                   [(-12.0, 12.0)])


def test_harmonic_analytic_density_normalizes():
    ref = orc.harmonic_analytic(1.0, 1.0, 0.7)
    xs = np.linspace(-9.0, 9.0, 2001)
    assert np.trapezoid(ref.rho(xs), xs) == pytest.approx(1.0, rel=1e-10)
    assert ref.x2 == pytest.approx(0.5 / math.tanh(0.35), rel=1e-12)
