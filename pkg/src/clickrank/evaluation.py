"""Mean Reciprocal Rank, the impression-order baseline and submission files."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .ingest import Session
from .ranking import RankedList

_logger = logging.getLogger(__name__)

SUBMISSION_HEADER = ["user_id", "session_id", "timestamp", "step", "item_recommendations"]


@dataclass
class EvalReport:
    mrr: float
    n_sessions: int
    reciprocal_ranks: dict[str, float] = field(default_factory=dict)
    hit_rate: float = 0.0

    def text(self) -> str:
        return f"MRR {self.mrr:.6f} over {self.n_sessions} sessions (hit@1 {self.hit_rate:.4f})"

    def key_values(self) -> str:
        return f"mrr={self.mrr!r}\nn={self.n_sessions}\nhit1={self.hit_rate!r}\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.key_values())


def read_report(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as f:
        return {k: float(v) for k, v in (line.strip().split("=", 1) for line in f if "=" in line)}


def reciprocal_rank(ranked: RankedList | Sequence[str], truth: str) -> float:
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    try:
        return 1.0 / (items.index(truth) + 1)
    except ValueError:
        return 0.0


def evaluate(predictions: Iterable[RankedList], ground_truth: Mapping[str, str]) -> EvalReport:
    """MRR over every ground-truth session; missing predictions count as 0."""
    by_session: dict[str, RankedList] = {}
    for p in predictions:
        if p.session_id in by_session:
            raise ValueError(f"duplicate prediction for session {p.session_id}")
        if p.session_id not in ground_truth:
            raise ValueError(f"prediction for session {p.session_id} has no ground truth")
        by_session[p.session_id] = p
    rr = {}
    for sid in sorted(ground_truth):
        pred = by_session.get(sid)
        if pred is None:
            rr[sid] = 0.0
            continue
        rr[sid] = reciprocal_rank(pred, ground_truth[sid])
        if rr[sid] == 0.0:
            _logger.warning("session %s: truth %s not in ranked list", sid, ground_truth[sid])
    n = len(rr)
    mrr = sum(rr.values()) / n if n else 0.0
    hits = sum(1 for v in rr.values() if v == 1.0) / n if n else 0.0
    return EvalReport(mrr, n, rr, hits)


def impression_baseline(sessions: Iterable[Session]) -> list[RankedList]:
    """Each masked clickout's impression list, unchanged."""
    out = []
    for s in sessions:
        target = s.target()
        if target is None:
            continue
        if not target.impressions:
            _logger.warning("session %s: target clickout has no impressions, skipped", s.session_id)
            continue
        out.append(RankedList(s.session_id, list(target.impressions), None,
                              user_id=s.user_id, timestamp=target.timestamp, step=target.step))
    return out


def write_submission(predictions: Iterable[RankedList], path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SUBMISSION_HEADER)
            for p in predictions:
                w.writerow([p.user_id, p.session_id, p.timestamp, p.step, " ".join(p.items)])
    except OSError as e:
        raise OSError(f"cannot write submission to {path}: {e}") from e


def read_submission(path) -> list[RankedList]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if header != SUBMISSION_HEADER:
            raise ValueError(f"{path}: unexpected submission header {header}")
        return [
            RankedList(row[1], row[4].split(), None, user_id=row[0], timestamp=int(row[2]), step=int(row[3]))
            for row in r
            if row
        ]


def write_scores(predictions: Iterable[RankedList], path):
    """Parallel score file: session_id and space-separated scores in rank order."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["session_id", "item_scores"])
        for p in predictions:
            scores = p.scores if p.scores is not None else []
            w.writerow([p.session_id, " ".join(repr(float(s)) for s in scores)])


def read_scores(path) -> dict[str, list[float]]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        next(r)
        return {row[0]: [float(s) for s in row[1].split()] for row in r if row}
