"""Gradient-boosted regression trees for the logistic objective.

Trees are grown with exact greedy split search on first/second-order
gradient statistics.  The same learner re-ranks MF candidates and stacks
base-model outputs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from .embed import session_items
from .ingest import Session
from .mf import LatentModel, impression_buckets, score_with_fallback
from .ranking import RankedList, rank_by_score

_logger = logging.getLogger(__name__)

MF_FEATURES = ("mf_score", "session_position", "user_bias", "impression_position", "item_bias")


@dataclass
class FeatureRow:
    group_id: str
    label: int
    mf_score: float
    session_position: float
    user_bias: float
    impression_position: int
    item_bias: float
    item_id: str = ""

    def vector(self) -> list[float]:
        return [getattr(self, f) for f in MF_FEATURES]


@dataclass(frozen=True)
class TreeParams:
    n_rounds: int = 100
    max_depth: int = 6
    shrinkage: float = 0.1
    min_child_weight: float = 1.0


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_leaf(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Leaf value reached by every row of ``x``."""
        node = np.zeros(len(x), dtype=np.int64)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        active = feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = x[rows, feature[n]] < threshold[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return np.asarray(self.value)[node]

    def n_internal(self) -> int:
        return sum(1 for f in self.feature if f >= 0)


@dataclass
class TreeEnsemble:
    feature_names: tuple[str, ...]
    trees: list[Tree] = field(default_factory=list)
    shrinkage: float = 0.1
    base_score: float = 0.0
    train_loss: list[float] = field(default_factory=list, compare=False)

    def dump(self) -> str:
        lines = [
            f"base_score={self.base_score!r} shrinkage={self.shrinkage!r} "
            f"features={','.join(self.feature_names)} trees={len(self.trees)}"
        ]
        for t, tree in enumerate(self.trees):
            lines.append(f"tree {t} nodes={len(tree.feature)}")

            def walk(i, depth):
                pad = "  " * (depth + 1)
                f = tree.feature[i]
                if f < 0:
                    lines.append(f"{pad}node={i} leaf={tree.value[i]!r}")
                else:
                    lines.append(
                        f"{pad}node={i} feature={self.feature_names[f]} "
                        f"threshold={tree.threshold[i]!r} left={tree.left[i]} right={tree.right[i]} "
                        f"value={tree.value[i]!r}"
                    )
                    walk(tree.left[i], depth + 1)
                    walk(tree.right[i], depth + 1)

            walk(0, 0)
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dump())

    @classmethod
    def loads(cls, text: str) -> "TreeEnsemble":
        lines = text.splitlines()
        head = dict(kv.split("=", 1) for kv in lines[0].split())
        names = tuple(head["features"].split(",")) if head["features"] else ()
        model = cls(names, [], float(head["shrinkage"]), float(head["base_score"]))
        pos = 1
        for _ in range(int(head["trees"])):
            n_nodes = int(lines[pos].split("nodes=")[1])
            pos += 1
            tree = Tree([-1] * n_nodes, [0.0] * n_nodes, [-1] * n_nodes, [-1] * n_nodes, [0.0] * n_nodes)
            for _ in range(n_nodes):
                kv = dict(p.split("=", 1) for p in lines[pos].split())
                i = int(kv["node"])
                if "leaf" in kv:
                    tree.value[i] = float(kv["leaf"])
                else:
                    tree.feature[i] = names.index(kv["feature"])
                    tree.threshold[i] = float(kv["threshold"])
                    tree.left[i] = int(kv["left"])
                    tree.right[i] = int(kv["right"])
                    tree.value[i] = float(kv["value"])
                pos += 1
            model.trees.append(tree)
        return model

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, min_child_weight: float):
    """Exact greedy search over all features and cut points.

    Returns (gain, feature, threshold) or None when no split improves the
    objective.  Rows go left when ``x[:, feature] < threshold``.
    """
    G, H = g.sum(), h.sum()
    parent = G * G / H
    best = None
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        gr, hr = G - gl, H - hl
        ok = (xs[:-1] < xs[1:]) & (hl >= min_child_weight) & (hr >= min_child_weight)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(ok, gl * gl / hl + gr * gr / hr - parent, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > 1e-12 and (best is None or gain[i] > best[0]):
            lo, hi = xs[i], xs[i + 1]
            thr = lo / 2 + hi / 2
            if not lo < thr <= hi:
                thr = hi
            best = (float(gain[i]), f, float(thr))
    return best


def _grow(x, g, h, params: TreeParams) -> Tree:
    tree = Tree()
    root = tree.add_leaf(0.0)
    stack = [(root, np.arange(len(x)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        gi, hi = g[idx], h[idx]
        tree.value[node] = float(-gi.sum() / hi.sum())
        if depth >= params.max_depth or len(idx) < 2:
            continue
        split = best_split(x[idx], gi, hi, params.min_child_weight)
        if split is None:
            continue
        _, f, thr = split
        go_left = x[idx, f] < thr
        left = tree.add_leaf(0.0)
        right = tree.add_leaf(0.0)
        tree.feature[node], tree.threshold[node] = f, thr
        tree.left[node], tree.right[node] = left, right
        # right pushed first so the left subtree is numbered depth-first
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return tree


def train_trees(x, y, params: TreeParams = TreeParams(), feature_names: Optional[Sequence[str]] = None) -> TreeEnsemble:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0 or len(x) != len(y):
        raise ValueError("need a non-empty (rows, features) matrix with one label per row")
    if y.min() == y.max():
        raise ValueError("degenerate labels: both classes must be present")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(x.shape[1]))
    p0 = y.mean()
    model = TreeEnsemble(names, [], params.shrinkage, float(np.log(p0 / (1 - p0))))
    margin = np.full(len(y), model.base_score)
    model.train_loss.append(logistic_loss(margin, y))
    for r in range(params.n_rounds):
        p = _sigmoid(margin)
        tree = _grow(x, p - y, p * (1 - p), params)
        model.trees.append(tree)
        margin = margin + params.shrinkage * tree.evaluate(x)
        model.train_loss.append(logistic_loss(margin, y))
    _logger.debug("boosted %d trees, train loss %.5f -> %.5f", params.n_rounds, model.train_loss[0], model.train_loss[-1])
    return model


def predict(model: TreeEnsemble, x) -> np.ndarray | float:
    """Margin: base_score + shrinkage * sum of leaf values.  Accepts one row or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xm = x[None] if single else x
    out = np.full(len(xm), model.base_score)
    for tree in model.trees:
        out += model.shrinkage * tree.evaluate(xm)
    return float(out[0]) if single else out


def feature_importance(model: TreeEnsemble) -> dict[str, int]:
    counts = dict.fromkeys(model.feature_names, 0)
    for tree in model.trees:
        for f in tree.feature:
            if f >= 0:
                counts[model.feature_names[f]] += 1
    return counts


def session_positions(session_or_items, impressions: Sequence[str]) -> list[float]:
    """Actions since the most recent interaction with each item, -1 if none."""
    if isinstance(session_or_items, Session):
        items = session_items(session_or_items.prefix())
    else:
        items = list(session_or_items)
    last_seen = {it: i for i, it in enumerate(items)}
    n = len(items)
    return [float(n - 1 - last_seen[it]) if it in last_seen else -1.0 for it in impressions]


def extract_features(session: Session, mf_model: LatentModel, price_model: Optional[LatentModel],
                     impressions: Optional[Sequence[str]] = None, prices=None,
                     truth: Optional[str] = None) -> list[FeatureRow]:
    """One feature row per impression of the session's target clickout."""
    target = session.target()
    if impressions is None:
        if target is None or not target.impressions:
            raise ValueError(f"session {session.session_id} has no clickout impressions to featurize")
        impressions, prices = target.impressions, target.prices
    positions = session_positions(session, impressions)
    buckets = impression_buckets(price_model, prices, len(impressions))
    u = mf_model.user_index.get(session.user_id)
    user_bias = float(mf_model.user_bias[u]) if u is not None else 0.0
    rows = []
    for pos, (item, bucket) in enumerate(zip(impressions, buckets)):
        i = mf_model.item_index.get(item)
        rows.append(
            FeatureRow(
                group_id=session.session_id,
                label=int(item == truth),
                mf_score=score_with_fallback(mf_model, price_model, session.user_id, item, bucket),
                session_position=positions[pos],
                user_bias=user_bias,
                impression_position=pos,
                item_bias=float(mf_model.item_bias[i]) if i is not None else 0.0,
                item_id=item,
            )
        )
    return rows


def rows_matrix(rows: Sequence, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([[float(getattr(r, n)) for n in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    y = np.array([r.label for r in rows], dtype=np.float64)
    return x, y


def train_reranker(rows: Sequence[FeatureRow], params: TreeParams = TreeParams()) -> TreeEnsemble:
    x, y = rows_matrix(rows, MF_FEATURES)
    return train_trees(x, y, params, MF_FEATURES)


def rank_group(model: TreeEnsemble, rows: Sequence, session_id: Optional[str] = None) -> RankedList:
    """Order one clickout's rows by predicted score; ties by impression position."""
    if not rows:
        raise ValueError("empty group")
    rows = sorted(rows, key=lambda r: r.impression_position)
    x, _ = rows_matrix(rows, model.feature_names)
    scores = predict(model, x)
    sid = rows[0].group_id if session_id is None else session_id
    return rank_by_score(sid, [r.item_id for r in rows], scores)


def group_rows(rows: Iterable) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in rows:
        groups.setdefault(r.group_id, []).append(r)
    return groups


def write_rows(rows: Sequence, path, delimiter: str = ","):
    """Write FeatureRow-like dataclasses; the header follows the field order."""
    if not rows:
        names = [f.name for f in fields(FeatureRow)]
    else:
        names = [f.name for f in fields(rows[0])]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, n)) for n in names])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_rows(path, cls=FeatureRow, delimiter: str = ","):
    types = {f.name: f.type for f in fields(cls)}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter=delimiter)
        out = []
        for rec in reader:
            kw = {}
            for name, raw in rec.items():
                t = types[name]
                kw[name] = int(raw) if t in (int, "int") else float(raw) if t in (float, "float") else raw
            out.append(cls(**kw))
        return out
