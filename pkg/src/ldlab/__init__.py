"""Lattice defect equilibration lab: supercell approximation of point
defects in Bravais lattices, with convergence-rate and Green's function
studies."""

from .errors import (ConfigurationError, LdlabError, NumericalError,
                     SingularityError, SolverError, StabilityError)
from .lattice import (Displacement, LatticeModel, StrainField, Supercell,
                      annulus_mask, apply_defect, build_homogeneous,
                      build_supercell, homogeneous_offsets, lambda_mask,
                      strain, subset_norm, truncate, truncation_min_radius)
from .potential import (CutoffSpline, EAMPotential, ExpRadial, MorsePotential,
                        MorseRadial, PairPotential, QuadraticFormPotential,
                        SpringRadial, find_lattice_parameter)
from .model import (Assembly, PhononReport, PhononSymbol, StabilityReport,
                    infsup_constant, phonon_check, stability_spectrum)
from .solver import (LatticePreconditioner, RelaxResult, SolverOptions,
                     prolong, relax)
from .greens import (DecayFit, GreensStudy, GreensTable, decay_fit,
                     defining_residual, greens_convergence_study,
                     greens_differences, periodic_greens)
from .study import (RateFit, StudyConfig, StudyResult, caccioppoli_check,
                    decay_check, fit_rate, poincare_check, run_convergence,
                    strain_error_magnitude, theory_checks, truncation_check)

__version__ = "0.1.0"
