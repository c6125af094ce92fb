"""Explicit rating labels, group-preference ranking and the contradiction subset."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .signal_model import TERTILE_CODES, EpochSet, ExplicitRating, GroupRanking


class Selection(NamedTuple):
    """One confirmation-task pick of a stimulus by a participant in a block."""

    participant_id: str
    block: int
    stimulus_id: str


@dataclass(frozen=True)
class NotApplicable:
    participant_id: str
    reason: str

    def to_dict(self) -> dict:
        return {"participant_id": self.participant_id, "status": "not_applicable",
                "reason": self.reason}


def aggregate_ratings(selections: Iterable, stimulus_ids, participant_ids=None):
    """Collapse confirmation picks to a 0-3 count per (participant, stimulus).

    The count is the number of distinct blocks in which the stimulus was
    picked; repeated picks inside one block count once.
    """
    stimulus_ids = list(stimulus_ids)
    known = set(stimulus_ids)
    blocks = defaultdict(set)
    seen_participants = []
    for sel in selections:
        sel = Selection(*sel)
        if sel.stimulus_id not in known:
            raise ValueError(f"unknown stimulus id {sel.stimulus_id!r}")
        blocks[(sel.participant_id, sel.stimulus_id)].add(sel.block)
        if sel.participant_id not in seen_participants:
            seen_participants.append(sel.participant_id)
    if participant_ids is None:
        participant_ids = seen_participants
    out = []
    for pid in participant_ids:
        for sid in stimulus_ids:
            count = len(blocks.get((pid, sid), ()))
            if count > 3:
                raise ValueError(f"{pid}/{sid} picked in {count} blocks; ratings cap at 3")
            out.append(ExplicitRating(pid, sid, count))
    return out


def tertile_sizes(n: int) -> tuple[int, int, int]:
    """(High, Medium, Low) sizes; extremes get floor(n/3), sizes differ by <= 1."""
    q, rem = divmod(n, 3)
    if rem == 2:
        return q, q + 1, q + 1
    return q, q + rem, q


def assign_tertiles(ordered_ids) -> dict[str, str]:
    """Tertiles for ids ordered from most to least preferred."""
    ordered_ids = list(ordered_ids)
    high, medium, _ = tertile_sizes(len(ordered_ids))
    out = {}
    for i, sid in enumerate(ordered_ids):
        out[sid] = "High" if i < high else "Medium" if i < high + medium else "Low"
    return out


def group_ranking(ratings: Iterable[ExplicitRating]) -> GroupRanking:
    """Rank stimuli by the summed ratings of all participants.

    Ranks are dense and descending (1 = highest score). Tertiles are cut on
    the order (score descending, stimulus id ascending).
    """
    scores: dict[str, int] = defaultdict(int)
    participants = set()
    for r in ratings:
        scores[r.stimulus_id] += int(r.count)
        participants.add(r.participant_id)
    if not scores:
        raise ValueError("no ratings to rank")
    distinct = sorted(set(scores.values()), reverse=True)
    dense = {s: i + 1 for i, s in enumerate(distinct)}
    order = sorted(scores, key=lambda sid: (-scores[sid], sid))
    return GroupRanking(
        scores=dict(sorted(scores.items())),
        ranks={sid: dense[scores[sid]] for sid in sorted(scores)},
        tertiles=dict(sorted(assign_tertiles(order).items())),
    )


def _rating_lookup(ratings) -> dict[tuple[str, str], int]:
    if isinstance(ratings, dict):
        return dict(ratings)
    return {(r.participant_id, r.stimulus_id): int(r.count) for r in ratings}


def explicit_labels(epochs: EpochSet, ratings) -> EpochSet:
    """Keep non-rejected epochs, labeled with the participant's 0-3 rating."""
    lookup = _rating_lookup(ratings)
    kept = epochs.subset(epochs.kept)
    labels = []
    for pid, sid in zip(kept.participant_ids, kept.stimulus_ids):
        try:
            labels.append(lookup[(pid, sid)])
        except KeyError:
            raise KeyError(f"missing rating for participant {pid!r}, stimulus {sid!r}") from None
    return kept.replace(labels=np.array(labels, np.int8), label_domain="rating")


def contradiction_subset(epochs: EpochSet, ratings, ranking: GroupRanking):
    """Rating-0 epochs of High and Low tertile stimuli, labeled by tertile.

    Returns :class:`NotApplicable` when either class has fewer than two
    epochs (no rating-0 stimuli, or all of them in one tertile).
    """
    lookup = _rating_lookup(ratings)
    pid = epochs.participant_ids[0] if len(epochs) else ""
    mask = np.zeros(len(epochs), dtype=bool)
    labels = np.zeros(len(epochs), dtype=np.int8)
    for i, (p, sid) in enumerate(zip(epochs.participant_ids, epochs.stimulus_ids)):
        if epochs.rejected[i]:
            continue
        if (p, sid) not in lookup:
            raise KeyError(f"missing rating for participant {p!r}, stimulus {sid!r}")
        tertile = ranking.tertiles.get(sid)
        if lookup[(p, sid)] == 0 and tertile in ("High", "Low"):
            mask[i] = True
            labels[i] = TERTILE_CODES[tertile]
    n_high = int(np.sum(mask & (labels == TERTILE_CODES["High"])))
    n_low = int(np.sum(mask & (labels == TERTILE_CODES["Low"])))
    if n_high < 2 or n_low < 2:
        n_zero = sum(1 for (p, _), c in lookup.items() if p == pid and c == 0)
        if n_zero == 0:
            reason = "no stimulus rated 0 (all marked attractive at least once)"
        else:
            reason = f"one tertile class is empty (High epochs={n_high}, Low epochs={n_low})"
        return NotApplicable(pid, reason)
    sub = epochs.subset(mask)
    return sub.replace(labels=labels[mask], label_domain="tertile")


def rating_zero_tertiles(epochs: EpochSet, ratings, ranking: GroupRanking) -> EpochSet:
    """Non-rejected rating-0 epochs labeled by tertile, Medium included.

    Used for the group-preference ERP averages; may be empty.
    """
    lookup = _rating_lookup(ratings)
    keep, labels = [], []
    for i, (p, sid) in enumerate(zip(epochs.participant_ids, epochs.stimulus_ids)):
        if epochs.rejected[i]:
            continue
        if (p, sid) not in lookup:
            raise KeyError(f"missing rating for participant {p!r}, stimulus {sid!r}")
        if lookup[(p, sid)] == 0 and sid in ranking.tertiles:
            keep.append(i)
            labels.append(TERTILE_CODES[ranking.tertiles[sid]])
    sub = epochs.subset(np.array(keep, dtype=np.int64))
    return sub.replace(labels=np.array(labels, np.int8), label_domain="tertile")


def write_ranking_csv(path, ranking: GroupRanking) -> Path:
    path = Path(path)
    order = sorted(ranking.scores, key=lambda s: (ranking.ranks[s], s))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stimulus_id", "score", "rank", "tertile"])
        for sid in order:
            w.writerow([sid, ranking.scores[sid], ranking.ranks[sid], ranking.tertiles[sid]])
    return path


def read_ranking_csv(path) -> GroupRanking:
    scores, ranks, tertiles = {}, {}, {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["stimulus_id"]
            scores[sid] = int(row["score"])
            ranks[sid] = int(row["rank"])
            tertiles[sid] = row["tertile"]
    return GroupRanking(dict(sorted(scores.items())), dict(sorted(ranks.items())),
                        dict(sorted(tertiles.items())))


def write_selections_csv(path, selections) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "block", "stimulus_id"])
        for sel in selections:
            sel = Selection(*sel)
            w.writerow([sel.participant_id, sel.block, sel.stimulus_id])
    return path


def read_selections_csv(path) -> list[Selection]:
    with Path(path).open(newline="") as fh:
        return [Selection(row["participant_id"], int(row["block"]), row["stimulus_id"])
                for row in csv.DictReader(fh)]
