"""Session-log ingestion: parsing, action filtering, splitting and masking."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, TextIO

_logger = logging.getLogger(__name__)

COLUMNS = (
    "user_id",
    "session_id",
    "timestamp",
    "step",
    "action_type",
    "reference",
    "impressions",
    "prices",
)

CLICKOUT = "clickout item"

HOTEL_ACTIONS = frozenset(
    {
        "interaction item rating",
        "interaction item info",
        CLICKOUT,
        "interaction item image",
        "interaction item deal",
        "search for item",
    }
)


class LogFormatError(ValueError):
    """Malformed session log input."""


@dataclass(frozen=True)
class Action:
    user_id: str
    session_id: str
    timestamp: int
    step: int
    action_type: str
    reference: Optional[str] = None
    impressions: Optional[tuple[str, ...]] = None
    prices: Optional[tuple[int, ...]] = None

    @property
    def is_clickout(self) -> bool:
        return self.action_type.lower() == CLICKOUT


@dataclass
class Session:
    session_id: str
    user_id: str
    actions: list[Action]

    def __len__(self):
        return len(self.actions)

    def target_index(self) -> Optional[int]:
        """Index of the clickout to predict: the last clickout with no reference."""
        for i in range(len(self.actions) - 1, -1, -1):
            a = self.actions[i]
            if a.is_clickout and a.reference is None:
                return i
        return None

    def target(self) -> Optional[Action]:
        i = self.target_index()
        return None if i is None else self.actions[i]

    def prefix(self) -> list[Action]:
        """Actions strictly before the target clickout (all actions if none)."""
        i = self.target_index()
        return list(self.actions) if i is None else self.actions[:i]


@dataclass
class SplitBundle:
    """The local and inner splits.

    ``local_test`` and ``inner_test`` hold masked copies; ``ground_truth``
    covers the masked sessions of both.  ``inner_train`` and ``inner_test``
    partition ``local_train`` by session id.
    """

    local_train: list[Session]
    local_test: list[Session]
    inner_train: list[Session]
    inner_test: list[Session]
    ground_truth: dict[str, str] = field(default_factory=dict)

    @property
    def local_validation(self) -> list[Session]:
        # the "local validation" set is not separately defined; it is the inner test split
        return self.inner_test


def _split_list(cell: str) -> Optional[tuple[str, ...]]:
    cell = cell.strip()
    if not cell:
        return None
    return tuple(cell.split("|"))


def parse_log(stream: TextIO, delimiter: str = ",") -> list[Action]:
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("empty input: missing header row")
    header = [h.strip() for h in header]
    for col in COLUMNS:
        if col not in header:
            raise LogFormatError(f"missing required column: {col}")
    pos = {c: header.index(c) for c in COLUMNS}

    actions = []
    for row in reader:
        if not row:
            continue
        lineno = reader.line_num
        if len(row) < len(header):
            raise LogFormatError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        impressions = _split_list(row[pos["impressions"]])
        prices_raw = _split_list(row[pos["prices"]])
        try:
            prices = None if prices_raw is None else tuple(int(p) for p in prices_raw)
            timestamp = int(row[pos["timestamp"]])
            step = int(row[pos["step"]])
        except ValueError as e:
            raise LogFormatError(f"line {lineno}: {e}") from None
        if prices is not None and (impressions is None or len(prices) != len(impressions)):
            n_imp = 0 if impressions is None else len(impressions)
            raise LogFormatError(
                f"line {lineno}: {len(prices)} prices for {n_imp} impressions"
            )
        if prices is not None and any(p < 0 for p in prices):
            raise LogFormatError(f"line {lineno}: negative price")
        ref = row[pos["reference"]]
        actions.append(
            Action(
                user_id=row[pos["user_id"]],
                session_id=row[pos["session_id"]],
                timestamp=timestamp,
                step=step,
                action_type=row[pos["action_type"]],
                reference=ref if ref != "" else None,
                impressions=impressions,
                prices=prices,
            )
        )
    return actions


def read_log(path, delimiter: str = ",") -> list[Action]:
    with open(path, newline="", encoding="utf-8") as f:
        return parse_log(f, delimiter)


def write_log(actions: Iterable[Action], stream: TextIO, delimiter: str = ","):
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow(COLUMNS)
    for a in actions:
        writer.writerow(
            [
                a.user_id,
                a.session_id,
                a.timestamp,
                a.step,
                a.action_type,
                a.reference if a.reference is not None else "",
                "|".join(a.impressions) if a.impressions else "",
                "|".join(str(p) for p in a.prices) if a.prices else "",
            ]
        )


def format_log(actions: Iterable[Action], delimiter: str = ",") -> str:
    buf = io.StringIO()
    write_log(actions, buf, delimiter)
    return buf.getvalue()


def save_sessions(sessions: Iterable[Session], path, delimiter: str = ","):
    with open(path, "w", newline="", encoding="utf-8") as f:
        write_log(flatten(sessions), f, delimiter)


def load_sessions(path, delimiter: str = ",") -> list[Session]:
    return group_sessions(read_log(path, delimiter))


def is_hotel_action(action: Action) -> bool:
    return action.action_type.lower() in HOTEL_ACTIONS


def filter_hotel_actions(actions: Iterable[Action]) -> list[Action]:
    return [a for a in actions if is_hotel_action(a)]


def filter_sessions(sessions: Iterable[Session]) -> list[Session]:
    """Filter every session's actions; sessions left empty are dropped."""
    out = []
    for s in sessions:
        kept = filter_hotel_actions(s.actions)
        if kept:
            out.append(Session(s.session_id, s.user_id, kept))
    return out


def group_sessions(actions: Iterable[Action]) -> list[Session]:
    """Group actions by session id, in order of first appearance."""
    groups: dict[str, list[Action]] = {}
    for a in actions:
        groups.setdefault(a.session_id, []).append(a)
    sessions = []
    for sid, acts in groups.items():
        users = {a.user_id for a in acts}
        if len(users) != 1:
            raise LogFormatError(f"session {sid} has actions from several users: {sorted(users)}")
        acts = sorted(acts, key=lambda a: a.step)
        steps = [a.step for a in acts]
        if len(set(steps)) != len(steps):
            raise LogFormatError(f"session {sid} has repeated step values")
        sessions.append(Session(sid, acts[0].user_id, acts))
    return sessions


def flatten(sessions: Iterable[Session]) -> list[Action]:
    return [a for s in sessions for a in s.actions]


def _split_key(session_id: str, seed: int) -> bytes:
    return hashlib.blake2b(f"{seed}:{session_id}".encode(), digest_size=8).digest()


def split_sessions(sessions: list[Session], ratio: float, seed: int) -> tuple[list[Session], list[Session]]:
    """Session-atomic random split.

    Sessions are ordered by a seeded hash of their id and the first
    ``round(ratio * n)`` go to train, so the result does not depend on input
    order and the train fraction is exact up to rounding.  Both outputs keep
    the input order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = {s.session_id for s in sessions}
    n_train = int(round(ratio * len(ids)))
    ranked = sorted(ids, key=lambda sid: (_split_key(sid, seed), sid))
    train_ids = set(ranked[:n_train])
    train = [s for s in sessions if s.session_id in train_ids]
    test = [s for s in sessions if s.session_id not in train_ids]
    return train, test


def mask_last_clickout(sessions: Iterable[Session]) -> tuple[list[Session], dict[str, str]]:
    """Null the reference of each session's last referenced clickout."""
    masked = []
    truth: dict[str, str] = {}
    for s in sessions:
        idx = None
        for i in range(len(s.actions) - 1, -1, -1):
            a = s.actions[i]
            if a.is_clickout and a.reference is not None:
                idx = i
                break
        if idx is None:
            masked.append(s)
            continue
        actions = list(s.actions)
        truth[s.session_id] = actions[idx].reference
        actions[idx] = replace(actions[idx], reference=None)
        masked.append(Session(s.session_id, s.user_id, actions))
    return masked, truth


def partition_cold_start(sessions: Iterable[Session]) -> tuple[list[Session], list[Session]]:
    singletons, multi = [], []
    for s in sessions:
        (singletons if len(s.actions) == 1 else multi).append(s)
    return singletons, multi


def make_splits(sessions: list[Session], ratio: float = 0.8, seed: int = 0) -> SplitBundle:
    """Local 80/20 split, then the same split again inside local train."""
    local_train, local_test = split_sessions(sessions, ratio, seed)
    inner_train, inner_test = split_sessions(local_train, ratio, seed + 1)
    local_test, truth = mask_last_clickout(local_test)
    inner_test, inner_truth = mask_last_clickout(inner_test)
    truth.update(inner_truth)
    _logger.info(
        "split %d sessions: local %d/%d, inner %d/%d",
        len(sessions), len(local_train), len(local_test), len(inner_train), len(inner_test),
    )
    return SplitBundle(local_train, local_test, inner_train, inner_test, truth)


def write_ground_truth(truth: dict[str, str], path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["session_id", "item_id"])
        for sid in sorted(truth):
            w.writerow([sid, truth[sid]])


def read_ground_truth(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["session_id", "item_id"]:
            raise LogFormatError(f"{path}: unexpected ground-truth header {header}")
        return {row[0]: row[1] for row in r if row}
