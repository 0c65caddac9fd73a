"""The ranked-list type shared by every ranker, combiner and evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class RankedList:
    """An ordering of one clickout's impression list.

    ``items`` is in rank order (best first).  ``scores``, when present, is
    aligned with ``items`` and non-increasing.  ``user_id``, ``timestamp`` and
    ``step`` identify the clickout row for submission files.
    """

    session_id: str
    items: list[str]
    scores: Optional[list[float]] = None
    user_id: str = ""
    timestamp: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"session {self.session_id}: duplicate items in ranked list")
        if self.scores is not None:
            if len(self.scores) != len(self.items):
                raise ValueError(f"session {self.session_id}: scores not aligned with items")

    def __len__(self):
        return len(self.items)

    def rank_of(self, item: str) -> int:
        """1-based rank of ``item``, 0 when absent."""
        try:
            return self.items.index(item) + 1
        except ValueError:
            return 0


def rank_by_score(session_id: str, impressions: Sequence[str], scores, **ids) -> RankedList:
    """Sort impressions by score descending; ties keep impression order.

    NaN scores are treated as -inf.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (len(impressions),):
        raise ValueError("one score per impression required")
    s = np.where(np.isnan(s), -np.inf, s)
    # stable sort on the negated score keeps earlier impressions first on ties
    order = np.argsort(-s, kind="stable")
    return RankedList(
        session_id,
        [impressions[i] for i in order],
        [float(s[i]) for i in order],
        **ids,
    )
