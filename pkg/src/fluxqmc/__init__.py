"""Uncertainty quantification for flux quantities of the stationary
diffusion equation with random coefficients: randomly shifted rank-1
lattice cubature combined with flux-producing finite element methods."""

from .errors import (AlignmentError, CapacityError, FluxQMCError,
                     InfeasibilityError, ModelInvalidError, SolverError,
                     TheoryViolationError)
from .field import (DecaySequence, FieldModel, build_mode_ordering,
                    check_assumptions, compute_decay, eval_field,
                    make_field_model, model_from_config, xi_eval)
from .fem import (LDGHOperator, MixedSolution, P1Operator, QoIVector,
                  RTHOperator, SolverConfig, check_a1_a2, qoi_eval,
                  solve_derivatives, solve_ldgh, solve_p1, solve_rt0_saddle,
                  solve_rth)
from .lattice import (CubatureResult, GeneratingVector, ShiftSet,
                      builtin_generating_vector, cbc_construct,
                      estimate_integral, generate_shifts, lattice_point,
                      lattice_points, load_generating_vector, map_gaussian,
                      map_uniform, shifted_point, squared_worst_case_error)
from .mesh import TriMesh, build_mesh
from .weights import (RatePrediction, WeightParams, alpha_weight,
                      derivative_growth_bound, error_constant, gamma_gaussian,
                      gamma_uniform, mode_weight_majorant, normal_cdf,
                      optimal_surrogate_weights, rho_factor, select_lambda,
                      surrogate_objective, theoretical_rate, zeta)

__version__ = "0.1.0"
