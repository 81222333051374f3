"""Variance-reduced stochastic optimization with pluggable sampling estimators."""

from .objective import (DenseQuadraticProblem, GroupedProblem, ObjectiveError,
                        Problem, QuadraticProblem, SmoothnessReport,
                        TridiagQuadraticProblem, empirical_hessian_variance,
                        exact_weighted_curvatures, grad_check,
                        lipschitz_constants, power_method, spectral_norm,
                        weighted_curvature_sq)
from .page import (PageConfig, PageConfigError, PageDivergence, Trace,
                   default_p, expected_complexity, iteration_budget, run_page,
                   run_page_composed, stepsize_composed, stepsize_nonconvex,
                   stepsize_pl)
from .sampling import (ComposedVariance, Draw, EnumerationBudgetError,
                       MCVarianceReport, SamplingError, SamplingSpec,
                       apply_draw, apply_draw_matrix, build, compose_variance,
                       composed_cardinality, composed_variance_exact, draw,
                       enumerate_draws, enumerated_cardinality,
                       enumerated_mean_error, extended_nice, full_batch,
                       importance, independent, lemma_rhs_composed, nice,
                       optimal_weights, rhs_bound, uniform_with_replacement,
                       variance_exact, variance_mc)
from .taskgen import (FixtureConstants, TaskGenError, example_fixture,
                      gen_controlled_li, gen_controlled_lpm, load_task,
                      save_task, stratify)
from .data import (DataError, LogisticProblem, SparseDataset, dump_libsvm,
                   logistic_problem, parse_libsvm, shard)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
