"""Thermal equilibrium density matrices from imaginary-time variational
Gaussian resolutions: a grid of Gaussians propagated in imaginary time and
assembled into partition functions, thermal expectations, and densities,
with exact-diagonalization and classical oracles for verification."""

__version__ = "0.1.0"

from .errors import (CheckpointError, DiffToleranceError, GaussResError,
                     GramSingularError, NumericalError, SectorCollapseError,
                     ValidationError, WidthCollapseError)
from .potential import MassMatrix, Potential, PolyGaussTerm, builtin, evaluate
from .gaussmath import (GaussianParam, diag_mask, full_mask, gram_matrix,
                        force_vector, hamiltonian_element, kinetic_element,
                        moment, observable_element, overlap, pack,
                        param_count, potential_element, unpack)
from .varprop import (IntegratorConfig, Trajectory, eom_rhs, init_delta,
                      propagate, trajectory_csv)
from .ensemble import (Ensemble, GridSpec, ThermalScan, checkpoint_taus,
                       density_profile, energy_expectation, expectation,
                       partition_function, propagate_ensemble, thermal_scan)
from .symmetry import (SymmetryAdapter, permutation_adapter, propagate_sym,
                       reflection_adapter, sym_assemble, sym_density_profile,
                       sym_element, sym_energy, sym_eom_rhs, sym_expectation,
                       sym_partition_function, sym_thermal_scan, transform)
from .oracle import (EDConfig, SpectralData, classical_partition,
                     classical_thermal, classical_thermal_scan, ed_energy,
                     ed_solve, ed_thermal, ed_thermal_scan, harmonic_analytic)
from .runner import diff, parse_run_file, presets, run, write_preset
