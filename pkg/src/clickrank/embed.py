"""Skip-gram item embeddings trained on sessions-as-sentences."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .ingest import Action, Session

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedParams:
    dimension: int = 60
    window: int = 5
    min_count: int = 1
    negatives: int = 5
    epochs: int = 5
    alpha: float = 0.025
    min_alpha: float = 1e-4
    seed: int = 1

    def __post_init__(self):
        for name in ("dimension", "window", "min_count", "negatives", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


class EmbeddingTable:
    def __init__(self, vocab: dict[str, int], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(vocab):
            raise ValueError("vectors must be |vocab| x dimension")
        if sorted(vocab.values()) != list(range(len(vocab))):
            raise ValueError("vocab indices must be 0..n-1")
        self.vocab = vocab
        self.vectors = vectors

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, item):
        return item in self.vocab

    def vector(self, item: str) -> np.ndarray:
        i = self.vocab.get(item)
        if i is None:
            return np.zeros(self.dimension)
        return self.vectors[i]

    def items(self) -> list[str]:
        out = [""] * len(self.vocab)
        for item, i in self.vocab.items():
            out[i] = item
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"dim={self.dimension} vocab={len(self)}\n")
            for item, row in zip(self.items(), self.vectors):
                f.write(item + " " + " ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as f:
            header = dict(kv.split("=") for kv in f.readline().split())
            dim, n = int(header["dim"]), int(header["vocab"])
            vocab = {}
            vectors = np.zeros((n, dim))
            for i in range(n):
                parts = f.readline().split()
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}: line {i + 2} has {len(parts) - 1} values, expected {dim}")
                vocab[parts[0]] = i
                vectors[i] = [float(v) for v in parts[1:]]
        return cls(vocab, vectors)


def session_items(actions: Iterable[Action] | Session) -> list[str]:
    """Item references of a session's actions, in order."""
    if isinstance(actions, Session):
        actions = actions.actions
    return [a.reference for a in actions if a.reference is not None]


@njit(cache=True)
def sgns_pair_grad(center, context, negs, valid):
    """Loss and gradients of one skip-gram pair with negative samples.

    loss = -log sig(c.o) - sum_k valid_k * log sig(-c.n_k)
    """
    s = 0.0
    for j in range(center.shape[0]):
        s += center[j] * context[j]
    sig = 1.0 / (1.0 + np.exp(-s))
    loss = -np.log(sig)
    g_center = (sig - 1.0) * context
    g_context = (sig - 1.0) * center
    g_negs = np.zeros_like(negs)
    for k in range(negs.shape[0]):
        if not valid[k]:
            continue
        sn = 0.0
        for j in range(center.shape[0]):
            sn += center[j] * negs[k, j]
        sig_n = 1.0 / (1.0 + np.exp(-sn))
        loss -= np.log(1.0 - sig_n)
        g_center += sig_n * negs[k]
        g_negs[k] = sig_n * center
    return loss, g_center, g_context, g_negs


@njit(cache=True)
def _train_epoch(w_in, w_out, centers, contexts, negatives, alphas):
    total = 0.0
    n_neg = negatives.shape[1]
    valid = np.ones(n_neg, dtype=np.bool_)
    negvecs = np.empty((n_neg, w_in.shape[1]))
    for p in range(centers.shape[0]):
        c = centers[p]
        o = contexts[p]
        for k in range(n_neg):
            valid[k] = negatives[p, k] != o
            negvecs[k] = w_out[negatives[p, k]]
        loss, g_c, g_o, g_n = sgns_pair_grad(w_in[c], w_out[o], negvecs, valid)
        total += loss
        a = alphas[p]
        w_in[c] -= a * g_c
        w_out[o] -= a * g_o
        for k in range(n_neg):
            if valid[k]:
                w_out[negatives[p, k]] -= a * g_n[k]
    return total


def _pairs(sentences: list[np.ndarray], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for sent in sentences:
        n = len(sent)
        for i in range(n):
            lo, hi = max(0, i - window), min(n, i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(sent[i])
                    contexts.append(sent[j])
    return np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64)


def build_vocab(sentences: Sequence[Sequence[str]], min_count: int = 1) -> dict[str, int]:
    """Items with at least ``min_count`` occurrences, by count then first appearance."""
    counts: dict[str, int] = {}
    for sent in sentences:
        for item in sent:
            counts[item] = counts.get(item, 0) + 1
    first = {item: i for i, item in enumerate(counts)}
    kept = [it for it, c in counts.items() if c >= min_count]
    kept.sort(key=lambda it: (-counts[it], first[it]))
    return {it: i for i, it in enumerate(kept)}


def train_item2vec(sessions: Iterable[Session | Sequence[str]], params: EmbedParams = EmbedParams()) -> EmbeddingTable:
    """Train skip-gram embeddings with negative sampling.

    Each session contributes the sentence of its action references.  Plain
    string sequences are accepted as sentences directly.
    """
    sentences = [session_items(s) if isinstance(s, Session) else list(s) for s in sessions]
    vocab = build_vocab(sentences, params.min_count)
    if not vocab:
        raise ValueError("no trainable items")
    encoded = [np.array([vocab[i] for i in s if i in vocab], dtype=np.int64) for s in sentences]
    centers, contexts = _pairs(encoded, params.window)

    rng = np.random.default_rng(params.seed)
    n, d = len(vocab), params.dimension
    w_in = (rng.random((n, d)) - 0.5) / d
    w_out = np.zeros((n, d))

    counts = np.zeros(n)
    for s in encoded:
        np.add.at(counts, s, 1)
    noise = counts**0.75
    noise /= noise.sum()
    cdf = np.cumsum(noise)

    n_pairs = len(centers)
    total_pairs = max(1, n_pairs * params.epochs)
    for epoch in range(params.epochs):
        if n_pairs == 0:
            break
        done = epoch * n_pairs + np.arange(n_pairs)
        alphas = np.maximum(params.alpha * (1.0 - done / total_pairs), params.min_alpha)
        negatives = np.searchsorted(cdf, rng.random((n_pairs, params.negatives)), side="right")
        np.minimum(negatives, n - 1, out=negatives)
        loss = _train_epoch(w_in, w_out, centers, contexts, negatives, alphas)
        _logger.debug("item2vec epoch %d: mean pair loss %.4f", epoch, loss / n_pairs)
    return EmbeddingTable(vocab, w_in)


def encode_session(table: EmbeddingTable, session: Session | Sequence[Action] | Sequence[str], max_len: int = 200) -> np.ndarray:
    """Embed the item references of the last ``max_len`` actions.

    Returns an array of shape (length, dimension).  Unknown items embed as zero.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if isinstance(session, Session):
        items = session_items(session)
    else:
        seq = list(session)
        items = session_items(seq) if seq and isinstance(seq[0], Action) else seq
    items = items[-max_len:]
    out = np.zeros((len(items), table.dimension))
    for t, item in enumerate(items):
        i = table.vocab.get(item)
        if i is not None:
            out[t] = table.vectors[i]
    return out
