"""Rule-aware conditional WGAN-GP for tabular data, with DP training and an evaluation battery."""
from .fixtures import builtin_fixture, load_adult
from .gan import TrainingConfig, sample_synthetic, train
from .knowledge import RuleSet, check_compliance
from .pipeline import fit_model, load_model, sample_model, save_model
from .privacy import DpConfig, epsilon_for
from .schema import DataTable, TableSchema, load_csv

__version__ = "0.1.0"

__all__ = ["DataTable", "DpConfig", "RuleSet", "TableSchema", "TrainingConfig", "builtin_fixture", "check_compliance",
           "epsilon_for", "fit_model", "load_adult", "load_csv", "load_model", "sample_model", "sample_synthetic",
           "save_model", "train"]
