"""Combining MF and GRU rankings: Borda count, a stacked tree model, and routing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .gbdt import TreeEnsemble, TreeParams, predict, rows_matrix, train_trees
from .ingest import Session
from .mf import MISSING_SCORE
from .ranking import RankedList, rank_by_score

MODES = ("stack", "borda", "mf-only", "rnn-only")
STACK_FEATURES = ("mf_rank", "mf_score", "rnn_rank", "rnn_score", "impression_position")


@dataclass
class StackRow:
    group_id: str
    label: int
    mf_rank: int
    rnn_rank: int
    mf_score: float
    rnn_score: float
    impression_position: int
    item_id: str = ""


def borda_combine(lists: Sequence[RankedList]) -> RankedList:
    """Sum m - r points per list; ties keep the first list's order."""
    if len(lists) < 2:
        raise ValueError("borda_combine needs at least two lists")
    first = lists[0]
    ref = set(first.items)
    for other in lists[1:]:
        diff = ref.symmetric_difference(other.items)
        if diff or len(other.items) != len(first.items):
            raise ValueError(f"ranked lists cover different items: {sorted(diff)}")
    m = len(first.items)
    points = dict.fromkeys(first.items, 0)
    for lst in lists:
        for r, item in enumerate(lst.items, start=1):
            points[item] += m - r
    return rank_by_score(first.session_id, first.items, [points[i] for i in first.items],
                         user_id=first.user_id, timestamp=first.timestamp, step=first.step)


def _finite(v: Optional[float]) -> float:
    if v is None or not math.isfinite(v):
        return MISSING_SCORE
    return float(v)


def _stack_group(sid, impressions, mf: RankedList, rnn: RankedList, truth: Optional[str]) -> list[StackRow]:
    for name, pred in (("mf", mf), ("rnn", rnn)):
        if set(pred.items) != set(impressions):
            raise ValueError(f"session {sid}: {name} prediction does not cover the impression list")
    mf_score = dict(zip(mf.items, mf.scores or [None] * len(mf)))
    rnn_score = dict(zip(rnn.items, rnn.scores or [None] * len(rnn)))
    return [
        StackRow(
            group_id=sid,
            label=int(item == truth),
            mf_rank=mf.rank_of(item),
            rnn_rank=rnn.rank_of(item),
            mf_score=_finite(mf_score[item]),
            rnn_score=_finite(rnn_score[item]),
            impression_position=pos,
            item_id=item,
        )
        for pos, item in enumerate(impressions)
    ]


def build_stack_rows(mf_preds: Mapping[str, RankedList], rnn_preds: Mapping[str, RankedList],
                     ground_truth: Mapping[str, str], impressions: Mapping[str, Sequence[str]]) -> list[StackRow]:
    """One row per (session, impression) with both base models' ranks and scores."""
    only = set(mf_preds).symmetric_difference(rnn_preds)
    if only:
        raise ValueError(f"sessions predicted by one base model only: {sorted(only)[:10]}")
    rows = []
    for sid in mf_preds:
        rows.extend(_stack_group(sid, impressions[sid], mf_preds[sid], rnn_preds[sid], ground_truth.get(sid)))
    return rows


def train_stacker(rows: Sequence[StackRow], params: TreeParams = TreeParams()) -> TreeEnsemble:
    x, y = rows_matrix(rows, STACK_FEATURES)
    return train_trees(x, y, params, STACK_FEATURES)


def stack_combine(model: TreeEnsemble, mf: RankedList, rnn: RankedList, impressions: Sequence[str]) -> RankedList:
    rows = _stack_group(mf.session_id, impressions, mf, rnn, None)
    x, _ = rows_matrix(rows, model.feature_names)
    scores = np.atleast_1d(predict(model, x))
    return rank_by_score(mf.session_id, list(impressions), scores,
                         user_id=mf.user_id, timestamp=mf.timestamp, step=mf.step)


Ranker = Callable[[Session], RankedList]


def cold_start_list(session: Session) -> RankedList:
    target = session.target()
    return RankedList(session.session_id, list(target.impressions), None,
                      user_id=session.user_id, timestamp=target.timestamp, step=target.step)


def route(session: Session, mode: str = "stack", mf: Optional[Ranker] = None, rnn: Optional[Ranker] = None,
          stacker: Optional[TreeEnsemble] = None) -> RankedList:
    """Rank one masked session's target impressions.

    Single-action sessions return the impression list unchanged; longer ones
    go through the base rankers and the selected combiner.
    """
    target = session.target()
    if target is None or not target.impressions:
        raise ValueError(f"session {session.session_id} has no clickout to predict")
    if len(session.actions) == 1:
        return cold_start_list(session)
    if mode not in MODES:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    ids = dict(user_id=session.user_id, timestamp=target.timestamp, step=target.step)

    def stamp(lst: RankedList) -> RankedList:
        return RankedList(session.session_id, lst.items, lst.scores, **ids)

    if mode == "mf-only":
        return stamp(mf(session))
    if mode == "rnn-only":
        return stamp(rnn(session))
    mf_list, rnn_list = stamp(mf(session)), stamp(rnn(session))
    if mode == "borda":
        return borda_combine([mf_list, rnn_list])
    if stacker is None:
        raise ValueError("stack mode requires a trained stacker")
    return stack_combine(stacker, mf_list, rnn_list, target.impressions)
