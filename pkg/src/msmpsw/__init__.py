"""Partial-history inverse-probability weighting for marginal structural models."""
from .panel import LongPanel, validate, expand_person_periods, read_csv, write_csv
from .ipw import WeightModelSpec, fit_weight_models, build_weights, build_survival_weights, weight_summary
from .estimate import EstimateResult, contrast_estimate, wls_estimate, wls_estimate_adjusted, cox_estimate, combined_estimate
from .infer import PairTest, pair_test, variance_of_difference, confidence_interval
from .select import SelectionResult, closed_test_select, selection_report
from .dgp import generate, generate_normal, generate_survival, preset

__version__ = "0.1.0"
