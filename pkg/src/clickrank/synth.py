"""Seeded synthetic session logs with clustered user preferences.

Every user prefers one item cluster.  Each hotel action, and each clickout
target, comes from the preferred cluster with probability ``affinity`` and
uniformly from the whole catalogue otherwise.  ``noise_rate`` is the chance
that a non-hotel action (filters, sort changes, destination searches) is
inserted before each generated hotel action.  With ``revisit_rate`` > 0 a
hotel action (or the clickout) may instead re-reference an item already seen
in the session.  Item prices rise with the
cluster id, so price categories carry preference signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import CLICKOUT, Action, write_log

HOTEL_INTERACTIONS = (
    "interaction item image",
    "interaction item info",
    "interaction item deal",
    "interaction item rating",
    "search for item",
)
NOISE_ACTIONS = (
    ("filter selection", "Sort by Price"),
    ("change of sort order", "price only"),
    ("search for destination", "Berlin, Germany"),
    ("search for poi", "Central Station"),
)


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 2000
    n_items: int = 500
    n_clusters: int = 20
    sessions_per_user: int = 2
    mean_session_length: float = 6.0
    impression_size: int = 25
    affinity: float = 0.8
    noise_rate: float = 0.1
    revisit_rate: float = 0.0
    seed: int = 42

    def validate(self):
        if min(self.n_users, self.n_items, self.n_clusters, self.sessions_per_user, self.impression_size) < 1:
            raise ValueError("counts must be positive")
        if self.n_clusters > self.n_items:
            raise ValueError("n_clusters must not exceed n_items")
        if self.impression_size > self.n_items:
            raise ValueError(f"impression size {self.impression_size} exceeds n_items {self.n_items}")
        if not 0 < self.affinity <= 1:
            raise ValueError("affinity must lie in (0, 1]")
        if not 0 <= self.revisit_rate <= 1:
            raise ValueError("revisit_rate must lie in [0, 1]")
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must lie in [0, 1)")
        if self.mean_session_length < 1:
            raise ValueError("mean_session_length must be >= 1")


def item_id(j: int) -> str:
    return str(100000 + j)


def item_cluster(j: int, spec: SynthSpec) -> int:
    return j * spec.n_clusters // spec.n_items


def item_price(j: int, spec: SynthSpec) -> int:
    # deterministic per item: cluster band plus a within-band offset
    return 40 + 15 * item_cluster(j, spec) + (j * 7) % 11


def generate_synthetic(spec: SynthSpec) -> list[Action]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clusters = np.array([item_cluster(j, spec) for j in range(spec.n_items)])
    members = [np.flatnonzero(clusters == c) for c in range(spec.n_clusters)]
    prices = np.array([item_price(j, spec) for j in range(spec.n_items)])

    def draw(pref: int) -> int:
        if rng.random() < spec.affinity:
            return int(rng.choice(members[pref]))
        return int(rng.integers(spec.n_items))

    def impressions_for(target: int):
        others = rng.choice(spec.n_items - 1, size=spec.impression_size - 1, replace=False)
        others = others + (others >= target)
        shown = np.concatenate([[target], others])
        rng.shuffle(shown)
        return tuple(item_id(j) for j in shown), tuple(int(prices[j]) for j in shown)

    actions = []
    timestamp = 1_541_030_400
    for u in range(spec.n_users):
        user = f"U{u:05d}"
        pref = int(rng.integers(spec.n_clusters))
        for k in range(spec.sessions_per_user):
            session = f"S{u:05d}{k:02d}"
            n_hotel = 1 + int(rng.poisson(spec.mean_session_length - 1))
            step = 0
            seen: list[int] = []
            for i in range(n_hotel):
                if rng.random() < spec.noise_rate:
                    step += 1
                    kind, ref = NOISE_ACTIONS[int(rng.integers(len(NOISE_ACTIONS)))]
                    actions.append(Action(user, session, timestamp + 7 * step, step, kind, ref))
                step += 1
                if seen and spec.revisit_rate > 0 and rng.random() < spec.revisit_rate:
                    target = seen[int(rng.integers(len(seen)))]
                else:
                    target = draw(pref)
                seen.append(target)
                ts = timestamp + 7 * step
                # the last hotel action is always the session's clickout
                if i == n_hotel - 1 or rng.random() < 0.1:
                    imp, pr = impressions_for(target)
                    actions.append(Action(user, session, ts, step, CLICKOUT, item_id(target), imp, pr))
                else:
                    kind = HOTEL_INTERACTIONS[int(rng.integers(len(HOTEL_INTERACTIONS)))]
                    actions.append(Action(user, session, ts, step, kind, item_id(target)))
            timestamp += 7 * step + 3600
    return actions


def write_synthetic(spec: SynthSpec, path, delimiter: str = ","):
    with open(path, "w", newline="", encoding="utf-8") as f:
        write_log(generate_synthetic(spec), f, delimiter)
