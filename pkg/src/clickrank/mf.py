"""Latent-factor ranking trained with the WARP k-order-statistic loss.

Two interaction matrices are supported: user x hotel and user x price
category.  The price-category model only serves as a fallback for hotels the
hotel model has never seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Literal, Optional, Sequence

import numpy as np
from numba import njit

from .ingest import Session, is_hotel_action
from .ranking import RankedList, rank_by_score

_logger = logging.getLogger(__name__)

# returned when neither the hotel nor the price model can score an item;
# finite so it survives tree threshold arithmetic
MISSING_SCORE = float(np.finfo(np.float64).min)

SCHEDULES = ("adagrad", "adadelta")
GRID = {
    "epochs": (150, 200, 300),
    "n_components": (200, 300),
    "learning_rate": (0.01, 0.1, 0.2),
    "schedule": SCHEDULES,
}


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MfHyper:
    epochs: int = 200
    n_components: int = 300
    learning_rate: float = 0.1
    schedule: str = "adadelta"
    k: int = 5
    n: int = 10
    max_trials: int = 100
    rho: float = 0.95
    epsilon: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if min(self.epochs, self.n_components, self.k, self.n, self.max_trials) < 1:
            raise ValueError("epochs, n_components, k, n and max_trials must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def in_grid(self) -> bool:
        return all(getattr(self, name) in values for name, values in GRID.items())


class PriceBuckets:
    """Quantile bins over observed prices."""

    def __init__(self, edges):
        self.edges = np.asarray(edges, dtype=np.float64)

    @classmethod
    def fit(cls, prices, n_buckets: int = 10) -> "PriceBuckets":
        prices = np.asarray(prices, dtype=np.float64)
        if prices.size == 0:
            raise ValueError("no prices to bucket")
        if n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        qs = np.linspace(0, 1, n_buckets + 1)[1:-1]
        return cls(np.quantile(prices, qs))

    @property
    def n_buckets(self) -> int:
        return len(self.edges) + 1

    def bucket(self, price) -> int:
        return int(np.searchsorted(self.edges, price, side="right"))


class InteractionMatrix:
    """Binary user x entity matrix in CSR form with external id maps."""

    def __init__(self, pairs: Iterable[tuple[str, object]], buckets: Optional[PriceBuckets] = None):
        user_index: dict[str, int] = {}
        entity_index: dict[object, int] = {}
        seen = set()
        rows, cols = [], []
        for user, entity in pairs:
            u = user_index.setdefault(user, len(user_index))
            e = entity_index.setdefault(entity, len(entity_index))
            if (u, e) in seen:
                continue
            seen.add((u, e))
            rows.append(u)
            cols.append(e)
        self.user_index = user_index
        self.entity_index = entity_index
        self.buckets = buckets
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        self.indices = cols[order]
        self.indptr = np.zeros(len(user_index) + 1, dtype=np.int64)
        np.add.at(self.indptr, rows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_entities(self) -> int:
        return len(self.entity_index)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def entries(self) -> set[tuple[int, int]]:
        return {(u, int(e)) for u in range(self.n_users) for e in self.row(u)}


def item_prices(sessions: Iterable[Session]) -> dict[str, int]:
    """Last observed displayed price of every impressed item."""
    prices: dict[str, int] = {}
    for s in sessions:
        for a in s.actions:
            if a.impressions and a.prices:
                prices.update(zip(a.impressions, a.prices))
    return prices


def build_interactions(
    sessions: Iterable[Session],
    mode: Literal["hotel", "price_category"] = "hotel",
    price_buckets: int = 10,
) -> InteractionMatrix:
    sessions = list(sessions)
    refs = [
        (s.user_id, a.reference)
        for s in sessions
        for a in s.actions
        if is_hotel_action(a) and a.reference is not None
    ]
    if mode == "hotel":
        return InteractionMatrix(refs)
    if mode != "price_category":
        raise ValueError(f"unknown interaction mode {mode!r}")

    all_prices = [p for s in sessions for a in s.actions if a.prices for p in a.prices]
    price_of = item_prices(sessions)
    priced = [(u, price_of[item]) for u, item in refs if item in price_of]
    if not priced or not all_prices:
        raise ValueError("price_category mode needs at least one interaction with a known price")
    buckets = PriceBuckets.fit(all_prices, price_buckets)
    return InteractionMatrix(((u, buckets.bucket(p)) for u, p in priced), buckets=buckets)


class LatentModel:
    def __init__(self, user_index, item_index, user_factors, item_factors, user_bias, item_bias, buckets=None):
        self.user_index = dict(user_index)
        self.item_index = dict(item_index)
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.user_bias = np.asarray(user_bias, dtype=np.float64)
        self.item_bias = np.asarray(item_bias, dtype=np.float64)
        self.buckets = buckets
        nu, d = self.user_factors.shape
        ni, d2 = self.item_factors.shape
        if d != d2 or self.user_bias.shape != (nu,) or self.item_bias.shape != (ni,):
            raise ValueError("inconsistent factor/bias shapes")
        if len(self.user_index) != nu or len(self.item_index) != ni:
            raise ValueError("index maps do not match factor shapes")

    @classmethod
    def zeros(cls, n_users: int, n_items: int, n_components: int) -> "LatentModel":
        return cls(
            {str(u): u for u in range(n_users)},
            {str(i): i for i in range(n_items)},
            np.zeros((n_users, n_components)),
            np.zeros((n_items, n_components)),
            np.zeros(n_users),
            np.zeros(n_items),
        )

    @property
    def n_components(self) -> int:
        return self.user_factors.shape[1]

    def save(self, path):
        def row(values):
            return " ".join(repr(float(v)) for v in values)

        users = sorted(self.user_index, key=self.user_index.get)
        items = sorted(self.item_index, key=self.item_index.get)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"components={self.n_components} users={len(users)} items={len(items)}\n")
            f.write("users " + " ".join(users) + "\n")
            f.write("items " + " ".join(str(i) for i in items) + "\n")
            if self.buckets is not None:
                f.write("buckets " + row(self.buckets.edges) + "\n")
            f.write("user_factors\n")
            for r in self.user_factors:
                f.write(row(r) + "\n")
            f.write("user_bias\n" + row(self.user_bias) + "\n")
            f.write("item_factors\n")
            for r in self.item_factors:
                f.write(row(r) + "\n")
            f.write("item_bias\n" + row(self.item_bias) + "\n")

    @classmethod
    def load(cls, path) -> "LatentModel":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        head = dict(kv.split("=") for kv in lines[0].split())
        d, nu, ni = int(head["components"]), int(head["users"]), int(head["items"])
        users = lines[1].split()[1:]
        items = lines[2].split()[1:]
        pos = 3
        buckets = None
        if lines[pos].startswith("buckets"):
            buckets = PriceBuckets([float(v) for v in lines[pos].split()[1:]])
            # bucket entities are integers
            items = [int(i) for i in items]
            pos += 1

        def matrix(n_rows, start):
            return np.array([[float(v) for v in lines[start + r].split()] for r in range(n_rows)]).reshape(n_rows, d)

        assert lines[pos] == "user_factors"
        uf = matrix(nu, pos + 1)
        pos += 1 + nu
        assert lines[pos] == "user_bias"
        ub = np.array([float(v) for v in lines[pos + 1].split()])
        pos += 2
        assert lines[pos] == "item_factors"
        itf = matrix(ni, pos + 1)
        pos += 1 + ni
        assert lines[pos] == "item_bias"
        ib = np.array([float(v) for v in lines[pos + 1].split()])
        return cls(
            {u: i for i, u in enumerate(users)},
            {it: i for i, it in enumerate(items)},
            uf, itf, ub, ib, buckets,
        )


class OptimizerState:
    """Per-parameter accumulators for adagrad (gradient sums only) or adadelta.

    Adagrad sums start at 1, which bounds the first steps by the learning rate.
    """

    def __init__(self, model: LatentModel, schedule: str = "adadelta"):
        start = 1.0 if schedule == "adagrad" else 0.0
        self.user_grad = np.full_like(model.user_factors, start)
        self.item_grad = np.full_like(model.item_factors, start)
        self.user_bias_grad = np.full_like(model.user_bias, start)
        self.item_bias_grad = np.full_like(model.item_bias, start)
        self.user_delta = np.zeros_like(model.user_factors)
        self.item_delta = np.zeros_like(model.item_factors)
        self.user_bias_delta = np.zeros_like(model.user_bias)
        self.item_bias_delta = np.zeros_like(model.item_bias)


@njit(cache=True)
def _step(param, grad, acc_g, acc_d, adadelta, lr, rho, eps):
    for j in range(param.shape[0]):
        g = grad[j]
        if adadelta:
            acc_g[j] = rho * acc_g[j] + (1.0 - rho) * g * g
            delta = math.sqrt(acc_d[j] + eps) / math.sqrt(acc_g[j] + eps) * g
            acc_d[j] = rho * acc_d[j] + (1.0 - rho) * delta * delta
            param[j] -= delta
        else:
            acc_g[j] += g * g
            param[j] -= lr * g / (math.sqrt(acc_g[j]) + eps)


@njit(cache=True)
def warp_update(U, V, bu, bi, ugr, igr, ubgr, ibgr, ud, idl, ubd, ibd, u, pos, neg, weight, adadelta, lr, rho, eps):
    """Apply one rank-weighted hinge update for the triple (u, pos, neg).

    The hinge is weight * (1 - s(u, pos) + s(u, neg)); user bias cancels
    out of the difference and so receives zero gradient.
    """
    g_u = weight * (V[neg] - V[pos])
    g_pos = -weight * U[u]
    g_neg = weight * U[u]
    b_pos = np.array([-weight])
    b_neg = np.array([weight])
    _step(U[u], g_u, ugr[u], ud[u], adadelta, lr, rho, eps)
    _step(V[pos], g_pos, igr[pos], idl[pos], adadelta, lr, rho, eps)
    _step(V[neg], g_neg, igr[neg], idl[neg], adadelta, lr, rho, eps)
    _step(bi[pos : pos + 1], b_pos, ibgr[pos : pos + 1], ibd[pos : pos + 1], adadelta, lr, rho, eps)
    _step(bi[neg : neg + 1], b_neg, ibgr[neg : neg + 1], ibd[neg : neg + 1], adadelta, lr, rho, eps)


@njit(cache=True)
def _predict(U, V, bu, bi, u, i):
    s = bu[u] + bi[i]
    for j in range(U.shape[1]):
        s += U[u, j] * V[i, j]
    return s


@njit(cache=True)
def warp_weight(n_items, trials):
    """log(floor((n_items - 1) / trials)), 0 when the ratio floors below 1."""
    r = (n_items - 1) // trials
    if r < 1:
        return 0.0
    return math.log(r)


@njit(cache=True)
def _warp_kos_epoch(indptr, indices, order, pos_draws, neg_draws, U, V, bu, bi,
                    ugr, igr, ubgr, ibgr, ud, idl, ubd, ibd, k, adadelta, lr, rho, eps):
    n_items = V.shape[0]
    n_sample = pos_draws.shape[1]
    max_trials = neg_draws.shape[1]
    cand = np.empty(n_sample, dtype=np.int64)
    cand_score = np.empty(n_sample)
    n_updates = 0
    for t in range(order.shape[0]):
        u = order[t]
        start = indptr[u]
        npos = indptr[u + 1] - start
        if npos == 0:
            continue
        m = min(n_sample, npos)
        for j in range(m):
            p = indices[start + int(pos_draws[t, j] * npos)]
            cand[j] = p
            cand_score[j] = _predict(U, V, bu, bi, u, p)
        ranked = np.argsort(-cand_score[:m], kind="mergesort")
        anchor = ranked[min(k, m) - 1]
        pos = cand[anchor]
        s_pos = cand_score[anchor]
        if not np.isfinite(s_pos):
            return -1 - u, n_updates
        row = indices[start : start + npos]
        for trial in range(max_trials):
            neg = neg_draws[t, trial]
            loc = np.searchsorted(row, neg)
            if loc < npos and row[loc] == neg:
                continue
            s_neg = _predict(U, V, bu, bi, u, neg)
            if not np.isfinite(s_neg):
                return -1 - u, n_updates
            if s_neg > s_pos - 1.0:
                w = warp_weight(n_items, trial + 1)
                if w > 0.0:
                    warp_update(U, V, bu, bi, ugr, igr, ubgr, ibgr, ud, idl, ubd, ibd,
                                u, pos, neg, w, adadelta, lr, rho, eps)
                    n_updates += 1
                    if not (np.isfinite(U[u]).all() and np.isfinite(V[pos]).all() and np.isfinite(V[neg]).all()
                            and np.isfinite(bi[pos]) and np.isfinite(bi[neg])):
                        return -1 - u, n_updates
                break
    return 0, n_updates


def init_model(matrix: InteractionMatrix, n_components: int, rng: np.random.Generator) -> LatentModel:
    d = n_components
    return LatentModel(
        {u: i for u, i in matrix.user_index.items()},
        {e: i for e, i in matrix.entity_index.items()},
        (rng.random((matrix.n_users, d)) - 0.5) / d,
        (rng.random((matrix.n_entities, d)) - 0.5) / d,
        np.zeros(matrix.n_users),
        np.zeros(matrix.n_entities),
        matrix.buckets,
    )


def train_mf(
    matrix: InteractionMatrix,
    hyper: MfHyper = MfHyper(),
    callback: Optional[Callable[[int, LatentModel, OptimizerState], None]] = None,
) -> LatentModel:
    """Fit a latent model with WARP-kOS updates, one sampled update per user per epoch.

    ``callback(epoch, model, state)`` runs after every epoch; the model is
    updated in place so callers must copy anything they keep.
    """
    if matrix.nnz == 0:
        raise ValueError("empty interaction matrix")
    rng = np.random.default_rng(hyper.seed)
    model = init_model(matrix, hyper.n_components, rng)
    state = OptimizerState(model, hyper.schedule)
    active = np.flatnonzero(np.diff(matrix.indptr) > 0)
    adadelta = hyper.schedule == "adadelta"
    for epoch in range(hyper.epochs):
        order = rng.permutation(active)
        pos_draws = rng.random((len(order), hyper.n))
        neg_draws = rng.integers(0, matrix.n_entities, size=(len(order), hyper.max_trials))
        status, n_updates = _warp_kos_epoch(
            matrix.indptr, matrix.indices, order, pos_draws, neg_draws,
            model.user_factors, model.item_factors, model.user_bias, model.item_bias,
            state.user_grad, state.item_grad, state.user_bias_grad, state.item_bias_grad,
            state.user_delta, state.item_delta, state.user_bias_delta, state.item_bias_delta,
            hyper.k, adadelta, hyper.learning_rate, hyper.rho, hyper.epsilon,
        )
        if status != 0 or not _finite(model):
            if status == 0:
                raise NonFiniteError(f"non-finite parameters after epoch {epoch}")
            user = -1 - status
            uid = next(k for k, v in matrix.user_index.items() if v == user)
            raise NonFiniteError(f"non-finite parameters in epoch {epoch} at user {uid!r} (index {user})")
        _logger.debug("mf epoch %d: %d updates", epoch, n_updates)
        if callback is not None:
            callback(epoch, model, state)
    return model


def _finite(model: LatentModel) -> bool:
    return bool(
        np.isfinite(model.user_factors).all()
        and np.isfinite(model.item_factors).all()
        and np.isfinite(model.item_bias).all()
    )


def score(model: LatentModel, user: int, item: int) -> float:
    nu, ni = len(model.user_bias), len(model.item_bias)
    if not (0 <= user < nu and 0 <= item < ni):
        raise IndexError(f"(user {user}, item {item}) out of range for {nu}x{ni} model")
    return float(model.user_factors[user] @ model.item_factors[item] + model.user_bias[user] + model.item_bias[item])


def _score_ids(model: LatentModel, user_id: str, entity) -> float:
    i = model.item_index[entity]
    u = model.user_index.get(user_id)
    if u is None:
        return float(model.item_bias[i])
    return score(model, u, i)


def score_with_fallback(model: LatentModel, price_model: Optional[LatentModel], user_id: str, item: str, item_price_bucket: Optional[int]) -> float:
    """Hotel-model score, or the price-category score for unseen hotels.

    Unknown users score by item (or bucket) bias alone.  Returns
    ``MISSING_SCORE`` when neither model can place the item.
    """
    if item in model.item_index:
        return _score_ids(model, user_id, item)
    if price_model is not None and item_price_bucket is not None and item_price_bucket in price_model.item_index:
        return _score_ids(price_model, user_id, item_price_bucket)
    return MISSING_SCORE


def impression_buckets(price_model: Optional[LatentModel], prices: Optional[Sequence[int]], n: int) -> list[Optional[int]]:
    if price_model is None or price_model.buckets is None or prices is None:
        return [None] * n
    return [price_model.buckets.bucket(p) for p in prices]


def impression_scores(model, price_model, user_id, impressions, prices=None) -> np.ndarray:
    buckets = impression_buckets(price_model, prices, len(impressions))
    return np.array([score_with_fallback(model, price_model, user_id, it, b) for it, b in zip(impressions, buckets)])


def rank_impressions(model: LatentModel, price_model: Optional[LatentModel], user_id: str,
                     impressions: Sequence[str], prices: Optional[Sequence[int]] = None,
                     session_id: str = "") -> RankedList:
    if not impressions:
        raise ValueError("empty impression list")
    scores = impression_scores(model, price_model, user_id, impressions, prices)
    return rank_by_score(session_id, list(impressions), scores, user_id=user_id)
