"""GRU sequence ranker over embedded session items.

The network reads a session's item embeddings, squashes the final hidden
state with a sigmoid, projects it to one logit per known item and applies a
log-softmax.  Training minimizes the negative log-likelihood of the clicked
item at the final valid step only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .embed import EmbeddingTable, encode_session, session_items
from .ingest import Session
from .ranking import RankedList, rank_by_score

_logger = logging.getLogger(__name__)

PARAMS = ("w_input", "w_hidden", "b_input", "b_hidden", "w_out", "b_out")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class GruRanker:
    """Single-layer GRU with gate order (reset, update, candidate).

    ``w_input`` is (3H, D), ``w_hidden`` (3H, H), ``w_out`` (H, n_items).
    """

    def __init__(self, item_index: dict[str, int], w_input, w_hidden, b_input, b_hidden, w_out, b_out):
        self.item_index = dict(item_index)
        self.w_input = np.asarray(w_input, dtype=np.float64)
        self.w_hidden = np.asarray(w_hidden, dtype=np.float64)
        self.b_input = np.asarray(b_input, dtype=np.float64)
        self.b_hidden = np.asarray(b_hidden, dtype=np.float64)
        self.w_out = np.asarray(w_out, dtype=np.float64)
        self.b_out = np.asarray(b_out, dtype=np.float64)
        h3, d = self.w_input.shape
        h = h3 // 3
        if (
            h3 != 3 * h
            or self.w_hidden.shape != (3 * h, h)
            or self.b_input.shape != (3 * h,)
            or self.b_hidden.shape != (3 * h,)
            or self.w_out.shape != (h, len(self.item_index))
            or self.b_out.shape != (len(self.item_index),)
        ):
            raise ValueError("inconsistent GRU parameter shapes")

    @classmethod
    def init(cls, item_index: dict[str, int], input_dim: int = 60, hidden_dim: int = 100, seed: int = 0, scale: Optional[float] = None):
        rng = np.random.default_rng(seed)
        n = len(item_index)
        bound = 1.0 / np.sqrt(hidden_dim) if scale is None else scale

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            item_index,
            u(3 * hidden_dim, input_dim),
            u(3 * hidden_dim, hidden_dim),
            u(3 * hidden_dim),
            u(3 * hidden_dim),
            u(hidden_dim, n),
            u(n),
        )

    @classmethod
    def zeros(cls, item_index, input_dim: int, hidden_dim: int):
        return cls.init(item_index, input_dim, hidden_dim, scale=0.0)

    @property
    def input_dim(self) -> int:
        return self.w_input.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def n_items(self) -> int:
        return self.w_out.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMS}

    def copy(self) -> "GruRanker":
        return GruRanker(self.item_index, *(p.copy() for p in self.params().values()))

    def save(self, path):
        items = sorted(self.item_index, key=self.item_index.get)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"input={self.input_dim} hidden={self.hidden_dim} items={self.n_items}\n")
            f.write("items " + " ".join(items) + "\n")
            for name, p in self.params().items():
                m = p.reshape(p.shape[0], -1) if p.ndim == 2 else p.reshape(1, -1)
                f.write(f"{name} {m.shape[0]} {m.shape[1]}\n")
                for r in m:
                    f.write(" ".join(repr(float(v)) for v in r) + "\n")

    @classmethod
    def load(cls, path) -> "GruRanker":
        with open(path, encoding="utf-8") as f:
            f.readline()
            items = f.readline().split()[1:]
            arrays = []
            for name in PARAMS:
                tag, rows, cols = f.readline().split()
                if tag != name:
                    raise ValueError(f"{path}: expected block {name}, found {tag}")
                m = np.array([[float(v) for v in f.readline().split()] for _ in range(int(rows))])
                arrays.append(m.reshape(int(rows), int(cols)) if name.startswith("w_") else m.reshape(-1))
        return cls({it: i for i, it in enumerate(items)}, *arrays)


@dataclass
class TrainBatch:
    inputs: np.ndarray  # (batch, max_len, input_dim), zero-padded
    lengths: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        b, t, _ = self.inputs.shape
        if self.lengths.shape != (b,) or self.targets.shape != (b,):
            raise ValueError("lengths/targets must have one entry per sequence")
        if b and (self.lengths.min() < 1 or self.lengths.max() > t):
            raise ValueError("sequence lengths must lie in [1, max_len]")


def pad_batch(sequences: Sequence[np.ndarray], targets: Sequence[int]) -> TrainBatch:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    dim = sequences[0].shape[1]
    x = np.zeros((len(sequences), int(lengths.max()), dim))
    for b, s in enumerate(sequences):
        x[b, : len(s)] = s
    return TrainBatch(x, lengths, np.asarray(targets, dtype=np.int64))


def _run_gru(model: GruRanker, x: np.ndarray, keep_cache: bool = False):
    b, t_max, _ = x.shape
    hdim = model.hidden_dim
    h = np.zeros((b, hdim))
    states = np.empty((t_max, b, hdim))
    cache = []
    gi_all = x @ model.w_input.T + model.b_input
    for t in range(t_max):
        gi = gi_all[:, t]
        gh = h @ model.w_hidden.T + model.b_hidden
        r = _sigmoid(gi[:, :hdim] + gh[:, :hdim])
        z = _sigmoid(gi[:, hdim : 2 * hdim] + gh[:, hdim : 2 * hdim])
        hn = gh[:, 2 * hdim :]
        n = np.tanh(gi[:, 2 * hdim :] + r * hn)
        h_new = (1.0 - z) * n + z * h
        if keep_cache:
            cache.append((h, r, z, n, hn))
        h = h_new
        states[t] = h
    return states, cache


def forward_batch(model: GruRanker, x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Log-scores (batch, n_items) read at each sequence's last valid step."""
    if x.shape[2] != model.input_dim:
        raise ValueError(f"input dimension {x.shape[2]} does not match model input_dim {model.input_dim}")
    states, _ = _run_gru(model, x)
    h_last = states[lengths - 1, np.arange(x.shape[0])]
    return _log_softmax(_sigmoid(h_last) @ model.w_out + model.b_out)


def forward(model: GruRanker, encoded: np.ndarray) -> np.ndarray:
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 2 or len(encoded) == 0:
        raise ValueError("encoded session must be a non-empty (length, dim) array")
    return forward_batch(model, encoded[None], np.array([len(encoded)]))[0]


def loss_and_grads(model: GruRanker, batch: TrainBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL of the batch targets and its gradient for every parameter."""
    x, lengths, targets = batch.inputs, batch.lengths, batch.targets
    b = x.shape[0]
    hdim = model.hidden_dim
    rows = np.arange(b)
    states, cache = _run_gru(model, x, keep_cache=True)
    h_last = states[lengths - 1, rows]
    a = _sigmoid(h_last)
    logp = _log_softmax(a @ model.w_out + model.b_out)
    loss = -logp[rows, targets].mean()

    d_logits = np.exp(logp)
    d_logits[rows, targets] -= 1.0
    d_logits /= b
    grads = {name: np.zeros_like(p) for name, p in model.params().items()}
    grads["w_out"] = a.T @ d_logits
    grads["b_out"] = d_logits.sum(axis=0)
    d_last = (d_logits @ model.w_out.T) * a * (1.0 - a)

    dh = np.zeros((b, hdim))
    d_gi = np.empty((b, 3 * hdim))
    d_gh = np.empty((b, 3 * hdim))
    for t in range(x.shape[1] - 1, -1, -1):
        dh += d_last * (lengths - 1 == t)[:, None]
        h_prev, r, z, n, hn = cache[t]
        dn = dh * (1.0 - z) * (1.0 - n * n)
        dz = dh * (h_prev - n) * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        d_gi[:, :hdim] = dr
        d_gi[:, hdim : 2 * hdim] = dz
        d_gi[:, 2 * hdim :] = dn
        d_gh[:, :hdim] = dr
        d_gh[:, hdim : 2 * hdim] = dz
        d_gh[:, 2 * hdim :] = dn * r
        grads["w_input"] += d_gi.T @ x[:, t]
        grads["b_input"] += d_gi.sum(axis=0)
        grads["w_hidden"] += d_gh.T @ h_prev
        grads["b_hidden"] += d_gh.sum(axis=0)
        dh = dh * z + d_gh @ model.w_hidden
    return float(loss), grads


def batch_loss(model: GruRanker, batch: TrainBatch) -> float:
    logp = forward_batch(model, batch.inputs, batch.lengths)
    return float(-logp[np.arange(len(batch.targets)), batch.targets].mean())


def make_batches(sequences: Sequence[np.ndarray], targets: Sequence[int], batch_size: int = 32) -> list[TrainBatch]:
    """Group sequences of similar length, then pad each group."""
    if len(sequences) != len(targets):
        raise ValueError("one target per sequence required")
    order = sorted(range(len(sequences)), key=lambda i: len(sequences[i]))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(pad_batch([sequences[i] for i in idx], [targets[i] for i in idx]))
    return batches


def train_rnn(
    batches: Sequence[TrainBatch],
    item_index: dict[str, int],
    epochs: int = 10,
    lr: float = 0.01,
    seed: int = 0,
    hidden_dim: int = 100,
    clip_norm: float = 5.0,
    model: Optional[GruRanker] = None,
) -> GruRanker:
    """Mini-batch gradient descent on the final-step NLL.

    Batch order is reshuffled every epoch from ``seed``.  A starting
    ``model`` may be given; it is copied, not modified.
    """
    if not batches:
        raise ValueError("no training batches")
    input_dim = batches[0].inputs.shape[2]
    if model is None:
        model = GruRanker.init(item_index, input_dim, hidden_dim, seed=seed)
    else:
        model = model.copy()
    for bt in batches:
        if bt.targets.size and bt.targets.max() >= model.n_items:
            raise ValueError("target index beyond output layer width")
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        total = 0.0
        for bi in rng.permutation(len(batches)):
            batch = batches[bi]
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss in epoch {epoch}, batch {bi} "
                    f"(size {len(batch.targets)}, max length {batch.inputs.shape[1]})"
                )
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = lr * (clip_norm / norm if norm > clip_norm else 1.0)
            for name, g in grads.items():
                getattr(model, name)[...] -= scale * g
            total += loss * len(batch.targets)
        _logger.debug("rnn epoch %d: mean loss %.4f", epoch, total / sum(len(b.targets) for b in batches))
    return model


def build_item_index(sessions: Iterable[Session]) -> dict[str, int]:
    """Output columns for every item referenced or impressed in ``sessions``."""
    index: dict[str, int] = {}
    for s in sessions:
        for a in s.actions:
            if a.reference is not None:
                index.setdefault(a.reference, len(index))
            for it in a.impressions or ():
                index.setdefault(it, len(index))
    return index


def training_examples(sessions: Iterable[Session], table: EmbeddingTable, item_index: dict[str, int], max_len: int = 200):
    """(encoded prefix, target column) for each session's last referenced clickout."""
    seqs, targets = [], []
    for s in sessions:
        last = None
        for i in range(len(s.actions) - 1, -1, -1):
            a = s.actions[i]
            if a.is_clickout and a.reference is not None:
                last = i
                break
        if last is None or s.actions[last].reference not in item_index:
            continue
        items = session_items(s.actions[:last])
        if not items:
            continue
        seqs.append(encode_session(table, items, max_len))
        targets.append(item_index[s.actions[last].reference])
    return seqs, targets


def predict_clickout(model: GruRanker, table: EmbeddingTable, session: Session | Sequence[str],
                     impressions: Sequence[str], max_len: int = 200) -> RankedList:
    """Rank ``impressions`` by the model's log-score; unknown items go last."""
    if not impressions:
        raise ValueError("empty impression list")
    if isinstance(session, Session):
        items = session_items(session.prefix())
        sid, uid = session.session_id, session.user_id
    else:
        items, sid, uid = list(session), "", ""
    if not items:
        raise ValueError(f"session {sid!r} has no item actions before the clickout; route it to the cold-start path")
    logp = forward(model, encode_session(table, items, max_len))
    return rank_impressions_from_scores(model, logp, impressions, sid, uid)


def rank_impressions_from_scores(model: GruRanker, logp: np.ndarray, impressions: Sequence[str], session_id: str = "", user_id: str = "") -> RankedList:
    scores = [logp[model.item_index[it]] if it in model.item_index else -np.inf for it in impressions]
    return rank_by_score(session_id, list(impressions), scores, user_id=user_id)
