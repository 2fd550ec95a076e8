"""Fidelity, utility and privacy metrics for synthetic tables."""
from .attacks import AttackConfig, AttackError, attribute_inference, membership_inference
from .fidelity import (MetricError, chi2_avg_p, chi2_column, chi2_sf, interval_overlap, ks_avg_p, ks_pvalue,
                       ks_statistic, pmse_score, regression_metrics, standardized_difference)
from .predictors import FeatureEncoder, PredictorError, PredictorSpec, fit_logistic, train_predictor
from .report import EvalReport, evaluate
from .utility import classifier_utility

__all__ = [
    "AttackConfig", "AttackError", "EvalReport", "FeatureEncoder", "MetricError", "PredictorError", "PredictorSpec",
    "attribute_inference", "chi2_avg_p", "chi2_column", "chi2_sf", "classifier_utility", "evaluate",
    "fit_logistic", "interval_overlap", "ks_avg_p", "ks_pvalue", "ks_statistic", "membership_inference",
    "pmse_score", "regression_metrics", "standardized_difference", "train_predictor",
]
