"""Single-trial ERP preference decoding on simulated RSVP sessions."""

from .evaluation import (
    EvaluationError,
    EvaluationReport,
    auc,
    cohort_summary,
    loo_scores,
    permutation_test,
)
from .features import EpochVectorizer, FeatureTable, featurize, vectorize
from .labeling import (
    NotApplicable,
    aggregate_ratings,
    contradiction_subset,
    explicit_labels,
    group_ranking,
)
from .lda import ShrinkageLDA, ledoit_wolf
from .preprocess import FilterSpec, RejectionPolicy, preprocess_recording
from .signal_model import (
    ContinuousRecording,
    Epoch,
    EpochSet,
    ExplicitRating,
    GroupRanking,
    read_epochs,
    validate_recording,
    write_epochs,
)
from .synthsession import SimulationConfig, simulate_cohort

__version__ = "0.1.0"

__all__ = [
    "ContinuousRecording", "Epoch", "EpochSet", "EpochVectorizer", "EvaluationError",
    "EvaluationReport", "ExplicitRating", "FeatureTable", "FilterSpec", "GroupRanking",
    "NotApplicable", "RejectionPolicy", "ShrinkageLDA", "SimulationConfig",
    "aggregate_ratings", "auc", "cohort_summary", "contradiction_subset",
    "explicit_labels", "featurize", "group_ranking", "ledoit_wolf", "loo_scores",
    "permutation_test", "preprocess_recording", "read_epochs", "simulate_cohort",
    "validate_recording", "vectorize", "write_epochs",
]
