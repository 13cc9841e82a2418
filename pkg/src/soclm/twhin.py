"""Shallow user/tweet/relation embeddings of the engagement graph.

Edges are scored by translating the user vector with a relation vector and
taking the dot product with the tweet vector. Training minimises the
negative-sampling logistic loss with Adagrad.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .graph import EngagementGraph

log = logging.getLogger(__name__)

EMB_MAGIC = b"SOCLM-EMB1"
USER, TWEET = 0, 1


@dataclass
class EmbeddingTable:
    user_vecs: np.ndarray
    tweet_vecs: np.ndarray
    rel_vecs: np.ndarray
    user_ids: tuple[str, ...] = ()
    tweet_ids: tuple[str, ...] = ()
    relations: tuple[str, ...] = ()
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.user_vecs.shape[1])

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_vecs.copy(), self.tweet_vecs.copy(), self.rel_vecs.copy(),
                              self.user_ids, self.tweet_ids, self.relations,
                              list(self.epoch_losses))

    @classmethod
    def init(cls, graph: EngagementGraph, dim: int, rng) -> "EmbeddingTable":
        if dim < 1:
            raise ValueError("dim must be >= 1")
        h = 0.5 / dim
        return cls(rng.uniform(-h, h, (graph.n_users, dim)),
                   rng.uniform(-h, h, (graph.n_tweets, dim)),
                   rng.uniform(-h, h, (len(graph.relations), dim)),
                   graph.user_ids, graph.tweet_ids, graph.relations)


@dataclass
class AdagradState:
    acc_user: np.ndarray
    acc_tweet: np.ndarray
    acc_rel: np.ndarray
    lr: float = 0.05
    eps: float = 1e-10

    @classmethod
    def for_table(cls, table: EmbeddingTable, lr=0.05, eps=1e-10) -> "AdagradState":
        return cls(np.zeros_like(table.user_vecs), np.zeros_like(table.tweet_vecs),
                   np.zeros_like(table.rel_vecs), lr, eps)


@dataclass
class NegSampleConfig:
    n_negatives: int = 3
    strategy: str = "mixed"  # uniform | prevalence | mixed
    side: str = "both"  # user | tweet | both

    def __post_init__(self):
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.strategy not in ("uniform", "prevalence", "mixed"):
            raise ValueError(f"unknown negative strategy {self.strategy!r}")
        if self.side not in ("user", "tweet", "both"):
            raise ValueError(f"unknown corruption side {self.side!r}")


@dataclass
class SparseGrads:
    """Row gradients keyed by entity index."""

    user: dict = field(default_factory=dict)
    tweet: dict = field(default_factory=dict)
    rel: dict = field(default_factory=dict)

    def add(self, kind: str, idx: int, g: np.ndarray):
        rows = getattr(self, kind)
        if idx in rows:
            rows[idx] = rows[idx] + g
        else:
            rows[idx] = g.copy()


def score_edge(u_vec, r_vec, t_vec) -> float:
    u = np.asarray(u_vec, dtype=np.float64)
    r = np.asarray(r_vec, dtype=np.float64)
    t = np.asarray(t_vec, dtype=np.float64)
    if not (u.shape == r.shape == t.shape) or u.ndim != 1:
        raise ValueError(f"dimension mismatch: {u.shape}, {r.shape}, {t.shape}")
    return float(np.dot(u + r, t))


def entity_frequencies(graph: EngagementGraph) -> tuple[np.ndarray, np.ndarray]:
    return (np.bincount(graph.edges[:, 0], minlength=graph.n_users).astype(np.float64),
            np.bincount(graph.edges[:, 1], minlength=graph.n_tweets).astype(np.float64))


def _draw(rng, n: int, size: int, cdf: np.ndarray | None) -> np.ndarray:
    if cdf is None:
        return rng.integers(0, n, size)
    return np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), n - 1)


def draw_negatives(edges: np.ndarray, n_users: int, n_tweets: int, user_freq, tweet_freq,
                   cfg: NegSampleConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt each edge ``cfg.n_negatives`` times.

    Returns ``(entities, sides)``, both shaped (E, n_negatives); ``sides`` is 0
    when the user was replaced and 1 when the tweet was. The replacement always
    differs from the original entity on that side.
    """
    E, k = edges.shape[0], cfg.n_negatives
    if cfg.side == "user" and n_users < 2:
        raise ValueError("cannot corrupt users: graph has a single user")
    if cfg.side == "tweet" and n_tweets < 2:
        raise ValueError("cannot corrupt tweets: graph has a single tweet")
    if n_users < 2 and n_tweets < 2:
        raise ValueError("cannot corrupt edges: a single user and a single tweet")
    if cfg.side == "user" or n_tweets < 2:
        sides = np.zeros((E, k), np.int8)
    elif cfg.side == "tweet" or n_users < 2:
        sides = np.ones((E, k), np.int8)
    else:
        sides = (rng.random((E, k)) < 0.5).astype(np.int8)

    cdf_u = np.cumsum(user_freq) if user_freq is not None else None
    cdf_t = np.cumsum(tweet_freq) if tweet_freq is not None else None
    ents = np.empty((E, k), np.int64)
    for j in range(k):
        if cfg.strategy == "uniform":
            prevalence = False
        elif cfg.strategy == "prevalence":
            prevalence = True
        else:
            prevalence = j % 2 == 1
        for side, n, cdf, col in ((USER, n_users, cdf_u, 0), (TWEET, n_tweets, cdf_t, 1)):
            rows = np.flatnonzero(sides[:, j] == side)
            if rows.size == 0:
                continue
            use = cdf if prevalence else None
            orig = edges[rows, col]
            val = _draw(rng, n, rows.size, use)
            for _ in range(64):
                bad = np.flatnonzero(val == orig)
                if bad.size == 0:
                    break
                val[bad] = _draw(rng, n, bad.size, use)
            bad = np.flatnonzero(val == orig)
            if bad.size:  # prevalence mass concentrated on the original entity
                val[bad] = (orig[bad] + 1 + rng.integers(0, n - 1, bad.size)) % n
            ents[rows, j] = val
    return ents, sides


def sample_negatives(edge, graph: EngagementGraph, cfg: NegSampleConfig, rng) -> list[tuple]:
    """Negatives for one ``(user_idx, tweet_idx, rel_idx)`` edge."""
    e = np.asarray(edge, dtype=np.int64).reshape(1, 3)
    uf, tf = entity_frequencies(graph) if cfg.strategy != "uniform" else (None, None)
    ents, sides = draw_negatives(e, graph.n_users, graph.n_tweets, uf, tf, cfg, rng)
    u, t, r = (int(x) for x in e[0])
    return [(int(x), t, r) if s == USER else (u, int(x), r) for x, s in zip(ents[0], sides[0])]


def nce_loss_and_grads(pos_edge, neg_edges, table: EmbeddingTable) -> tuple[float, SparseGrads]:
    """Negated negative-sampling log-likelihood of one positive and its negatives."""
    grads = SparseGrads()
    loss = 0.0
    for i, (u, t, r) in enumerate([tuple(pos_edge)] + [tuple(e) for e in neg_edges]):
        uv, tv, rv = table.user_vecs[u], table.tweet_vecs[t], table.rel_vecs[r]
        f = float(np.dot(uv + rv, tv))
        if i == 0:
            term = np.logaddexp(0.0, -f)
            c = -np.exp(-np.logaddexp(0.0, f))  # sigma(f) - 1
        else:
            term = np.logaddexp(0.0, f)
            c = np.exp(-np.logaddexp(0.0, -f))  # sigma(f)
        if not np.isfinite(term):
            raise FloatingPointError(
                f"non-finite loss on edge ({table_id(table, 'user', u)}, "
                f"{table_id(table, 'tweet', t)}, {table_id(table, 'rel', r)})")
        loss += term
        grads.add("user", u, c * tv)
        grads.add("rel", r, c * tv)
        grads.add("tweet", t, c * (uv + rv))
    return float(loss), grads


def table_id(table: EmbeddingTable, kind: str, idx: int) -> str:
    ids = {"user": table.user_ids, "tweet": table.tweet_ids, "rel": table.relations}[kind]
    return ids[idx] if idx < len(ids) else f"{kind}#{idx}"


def adagrad_step(table: EmbeddingTable, grads: SparseGrads, state: AdagradState) -> None:
    for kind, params, acc in (("user", table.user_vecs, state.acc_user),
                              ("tweet", table.tweet_vecs, state.acc_tweet),
                              ("rel", table.rel_vecs, state.acc_rel)):
        for idx, g in getattr(grads, kind).items():
            if g.shape != params[idx].shape:
                raise ValueError(f"{kind} gradient shape {g.shape} != {params[idx].shape}")
            acc[idx] += g * g
            params[idx] -= state.lr * g / (np.sqrt(acc[idx]) + state.eps)


@dataclass
class TwhinConfig:
    dim: int = 32
    epochs: int = 10
    lr: float = 0.05
    eps: float = 1e-10
    neg: NegSampleConfig = field(default_factory=NegSampleConfig)
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "TwhinConfig":
        d = dict(d)
        neg = d.pop("neg", {})
        return cls(neg=neg if isinstance(neg, NegSampleConfig) else NegSampleConfig(**neg), **d)


def train_twhin(graph: EngagementGraph, cfg: TwhinConfig | None = None,
                state: AdagradState | None = None) -> EmbeddingTable:
    """Shuffled-epoch SGD over all edges.

    ``threads == 1`` is bit-reproducible for a fixed seed; more threads run
    unsynchronised (hogwild) workers over edge partitions.
    """
    cfg = cfg or TwhinConfig()
    if graph.n_edges == 0:
        raise ValueError("graph has no edges")
    rng = np.random.default_rng(cfg.seed)
    table = EmbeddingTable.init(graph, cfg.dim, rng)
    if state is None:
        state = AdagradState.for_table(table, cfg.lr, cfg.eps)
    uf, tf = entity_frequencies(graph)
    edges = np.ascontiguousarray(graph.edges)
    for epoch in range(cfg.epochs):
        order = rng.permutation(graph.n_edges)
        ents, sides = draw_negatives(edges[order], graph.n_users, graph.n_tweets, uf, tf,
                                     cfg.neg, rng)
        args = (table.user_vecs, table.tweet_vecs, table.rel_vecs,
                state.acc_user, state.acc_tweet, state.acc_rel, edges, order, ents, sides,
                float(state.lr), float(state.eps))
        if cfg.threads > 1:
            total, bad = kernels.sgd_hogwild(*args, int(cfg.threads))
        else:
            total, bad = kernels.sgd_epoch(*args)
        if bad >= 0:
            u, t, r = edges[order[bad]]
            raise FloatingPointError(
                f"non-finite loss in epoch {epoch} at edge ({table_id(table, 'user', u)}, "
                f"{table_id(table, 'tweet', t)}, {table_id(table, 'rel', r)})")
        mean = total / graph.n_edges
        table.epoch_losses.append(float(mean))
        log.info("twhin epoch %d mean loss %.5f", epoch, mean)
    return table


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Binary dump: all entities in one table with ``user:``/``tweet:``/``rel:`` ids."""
    ids = ([f"user:{x}" for x in table.user_ids] + [f"tweet:{x}" for x in table.tweet_ids]
           + [f"rel:{x}" for x in table.relations])
    rows = np.vstack([table.user_vecs, table.tweet_vecs, table.rel_vecs]).astype("<f4")
    if len(ids) != rows.shape[0]:
        raise ValueError("id table does not match embedding rows")
    blob = "\n".join(ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.tobytes())


def load_embeddings(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if not data.startswith(EMB_MAGIC):
        raise ValueError(f"{path}: bad magic")
    off = len(EMB_MAGIC)
    n, dim, blen = struct.unpack_from("<III", data, off)
    off += 12
    ids = data[off:off + blen].decode("utf-8").split("\n") if blen else []
    off += blen
    rows = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    rows = rows.astype(np.float64)
    groups = {"user": [], "tweet": [], "rel": []}
    for i, full in enumerate(ids):
        kind, _, name = full.partition(":")
        groups[kind].append((name, i))
    pick = {k: (tuple(x for x, _ in v), [i for _, i in v]) for k, v in groups.items()}
    return EmbeddingTable(rows[pick["user"][1]], rows[pick["tweet"][1]], rows[pick["rel"][1]],
                          pick["user"][0], pick["tweet"][0], pick["rel"][0])


def export_tsv(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prefix, ids, rows in (("user", table.user_ids, table.user_vecs),
                                  ("tweet", table.tweet_ids, table.tweet_vecs),
                                  ("rel", table.relations, table.rel_vecs)):
            for name, row in zip(ids, rows):
                fh.write(f"{prefix}:{name}\t" + "\t".join(f"{x:.6g}" for x in row) + "\n")
