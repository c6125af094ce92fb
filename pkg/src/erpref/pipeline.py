"""In-memory cohort processing, one participant at a time.

A default participant occupies close to a gigabyte as epochs, so cohort runs
keep only the reduced products (feature tables and condition means) and drop
each recording and epoch set once these are computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .evaluation import EvaluationReport, permutation_test
from .features import FeatureTable, featurize
from .labeling import (
    NotApplicable,
    contradiction_subset,
    explicit_labels,
    group_ranking,
    rating_zero_tertiles,
)
from .neurostats import EXPLICIT_CONDITIONS, GROUP_CONDITIONS, condition_means
from .preprocess import FilterSpec, PreprocessSummary, RejectionPolicy, preprocess_recording
from .signal_model import GroupRanking, epoch_time_axis
from .synthsession import SimulationConfig, simulate_participant, simulate_ratings

TASKS = ("explicit", "group")


@dataclass(frozen=True)
class ParticipantProducts:
    participant_id: str
    summary: PreprocessSummary
    explicit: FeatureTable
    group: FeatureTable | NotApplicable
    explicit_means: dict
    group_means: dict


def evaluation_seed(seed: int, task: str, index: int) -> int:
    """Permutation seed of one participant and task, derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), TASKS.index(task), int(index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def process_participant(rec, ratings, ranking: GroupRanking,
                        spec: FilterSpec = FilterSpec(),
                        policy: RejectionPolicy = RejectionPolicy(),
                        channels=("Fz", "Pz")) -> ParticipantProducts:
    epochs, summary = preprocess_recording(rec, spec, policy)
    labeled = explicit_labels(epochs, ratings)
    explicit = featurize(labeled)
    explicit_means = condition_means(labeled, EXPLICIT_CONDITIONS, channels)
    del labeled
    subset = contradiction_subset(epochs, ratings, ranking)
    group = subset if isinstance(subset, NotApplicable) else featurize(subset)
    del subset
    group_means = condition_means(rating_zero_tertiles(epochs, ratings, ranking),
                                  GROUP_CONDITIONS, channels)
    return ParticipantProducts(summary.participant_id or rec.participant_id, summary,
                               explicit, group, explicit_means, group_means)


def simulated_products(config: SimulationConfig, spec: FilterSpec = FilterSpec(),
                       policy: RejectionPolicy = RejectionPolicy(), channels=("Fz", "Pz"),
                       participants=None) -> Iterator[ParticipantProducts]:
    """Simulate and reduce participants one by one.

    The group ranking is computed from the full cohort's ratings, which the
    simulator reproduces without generating voltages.
    """
    all_ratings, _ = simulate_ratings(config)
    ranking = group_ranking(all_ratings)
    indices = range(config.n_participants) if participants is None else participants
    for i in indices:
        rec, ratings, _ = simulate_participant(config, i)
        yield process_participant(rec, ratings, ranking, spec, policy, channels)


def evaluate_table(table, task: str, n_perm: int, seed: int, index: int,
                   participant_id: str, n_jobs: int = 1):
    """Permutation-tested LOO AUC of one feature table, or NotApplicable as is."""
    if isinstance(table, NotApplicable):
        return table
    return permutation_test(
        table.X, table.labels, n_perm=n_perm, seed=evaluation_seed(seed, task, index),
        participant_id=participant_id, task=task, n_jobs=n_jobs,
    )


def is_report(x) -> bool:
    return isinstance(x, EvaluationReport)


def time_axis_for(config: SimulationConfig) -> np.ndarray:
    return epoch_time_axis(config.sampling_rate_hz)
