"""Reflected generalized backward doubly stochastic equations, numerically.

Simulates normally reflected diffusions with boundary local time, solves the
associated backward equations (penalized and directly reflected) by
least-squares Monte Carlo under a frozen backward path, applies the pathwise
flow transformation that removes the backward noise, and assembles the
solution field u(t,x) with its validation diagnostics.
"""

from .errors import (NumericsError, RangeError, RbdsdeError, RegressionError,
                     ValidationError)
from .geometry import Domain, ball, ellipsoid
from .noise import (PathBundle, TimeGrid, backward_ito_integral,
                    backward_stratonovich_integral, coarsen_bundle,
                    dump_bundle, load_bundle, sample_bundle)
from .reflected_sde import (PathEnsemble, ReflectedPath, SdeSpec,
                            make_ensemble, moment_scaling_report,
                            simulate_ensemble, simulate_reflected)
from .bdsde import (BackwardSolution, CoefficientSet, Constants,
                    RegressionBasis, skorokhod_residual, solve_generalized,
                    solve_penalized, solve_reflected_direct)
from .fixpoint import (NormWeights, PicardReport, comparison_check,
                       picard_solve, weighted_distance)
from .doss import (FlowField, InverseTable, NoiseCoefficient,
                   conversion_residual, invert_flow, solve_flow,
                   transform_coefficients)
from .field_lab import (SolutionField, b_measurability_probe, build_field,
                        deterministic_pde_residual, obstacle_gap_report)
from .scenarios import Scenario, build_scenario, scenario_from_config

__version__ = "0.1.0"
