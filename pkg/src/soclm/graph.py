"""Engagement graph, corpus, labels and engagement records.

Also hosts the planted synthetic world used for every desk-scale experiment
and the tweet-level train/dev/test splitter.
"""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

REC_MAGIC = b"SOCLM-REC1"


class GraphFormatError(ValueError):
    """Raised for malformed input files."""


@dataclass(eq=False)
class EngagementGraph:
    """Typed, directed user->tweet multigraph.

    ``edges`` is an int64 array of shape (E, 3) holding
    (user index, tweet index, relation index) into the id tuples.
    """

    user_ids: tuple[str, ...]
    tweet_ids: tuple[str, ...]
    relations: tuple[str, ...]
    edges: np.ndarray

    def __post_init__(self):
        self.user_ids = tuple(self.user_ids)
        self.tweet_ids = tuple(self.tweet_ids)
        self.relations = tuple(self.relations)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        if not self.relations:
            raise ValueError("relation list must be non-empty")
        if len(set(self.relations)) != len(self.relations):
            raise ValueError("relation list contains duplicates")
        for name, ids in (("user", self.user_ids), ("tweet", self.tweet_ids)):
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {name} ids")
        if self.edges.size:
            lim = (len(self.user_ids), len(self.tweet_ids), len(self.relations))
            for col, (name, n) in enumerate(zip(("user", "tweet", "relation"), lim)):
                c = self.edges[:, col]
                if c.min() < 0 or c.max() >= n:
                    raise ValueError(f"edge references unknown {name} index")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_tweets(self) -> int:
        return len(self.tweet_ids)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_triples(self) -> Iterator[tuple[str, str, str]]:
        for u, t, r in self.edges:
            yield self.user_ids[u], self.tweet_ids[t], self.relations[r]

    def __eq__(self, other):
        if not isinstance(other, EngagementGraph):
            return NotImplemented
        return (self.user_ids == other.user_ids and self.tweet_ids == other.tweet_ids
                and self.relations == other.relations
                and np.array_equal(self.edges, other.edges))


@dataclass
class Corpus:
    ids: list[str]
    texts: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.texts):
            raise ValueError("ids and texts differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("corpus tweet ids must be unique")
        if any(t is None for t in self.texts):
            raise ValueError("corpus texts must be non-null")
        self._index = {tid: i for i, tid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def index(self, tweet_id: str) -> int:
        return self._index[tweet_id]

    def __contains__(self, tweet_id):
        return tweet_id in self._index

    def text(self, tweet_id: str) -> str:
        return self.texts[self._index[tweet_id]]


@dataclass
class LabelSet:
    labels: dict[str, int]
    class_names: list[str]

    def __post_init__(self):
        c = len(self.class_names)
        if any(not 0 <= v < c for v in self.labels.values()):
            raise ValueError("class id out of range")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


class EngagementRecord(NamedTuple):
    user_vector: np.ndarray
    tweet_id: str


@dataclass
class RecordSet:
    """Engagement records stored column-wise: one user vector per record."""

    user_vecs: np.ndarray
    tweet_ids: list[str]

    def __post_init__(self):
        self.user_vecs = np.asarray(self.user_vecs, dtype=np.float64)
        if self.user_vecs.ndim != 2 or self.user_vecs.shape[0] != len(self.tweet_ids):
            raise ValueError("user_vecs must be (n_records, dim) aligned with tweet_ids")

    def __len__(self):
        return len(self.tweet_ids)

    def __iter__(self) -> Iterator[EngagementRecord]:
        for v, t in zip(self.user_vecs, self.tweet_ids):
            yield EngagementRecord(v, t)

    @property
    def dim(self) -> int:
        return int(self.user_vecs.shape[1])

    def subset(self, mask) -> "RecordSet":
        idx = np.flatnonzero(mask)
        return RecordSet(self.user_vecs[idx], [self.tweet_ids[i] for i in idx])


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_engagement_log(path) -> EngagementGraph:
    """Parse a ``user<TAB>tweet<TAB>relation`` log.

    Relations are numbered in order of first appearance; duplicate lines are
    kept as parallel edges.
    """
    users: dict[str, int] = {}
    tweets: dict[str, int] = {}
    rels: dict[str, int] = {}
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise GraphFormatError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            u, t, r = parts
            edges.append((users.setdefault(u, len(users)),
                          tweets.setdefault(t, len(tweets)),
                          rels.setdefault(r, len(rels))))
    if not edges:
        raise GraphFormatError(f"{path}: engagement log has no edges")
    return EngagementGraph(tuple(users), tuple(tweets), tuple(rels), np.array(edges))


def save_engagement_log(graph: EngagementGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, t, r in graph.edge_triples():
            fh.write(f"{u}\t{t}\t{r}\n")


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tid, text in zip(corpus.ids, corpus.texts):
            fh.write(json.dumps({"id": tid, "text": text}, ensure_ascii=False) + "\n")


def load_corpus(path) -> Corpus:
    ids, texts = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                texts.append(str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"{path}: line {lineno}: {exc}") from None
    return Corpus(ids, texts)


def save_labels(labels: LabelSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tid, c in labels.labels.items():
            fh.write(f"{tid}\t{labels.class_names[c]}\n")


def load_labels(path, corpus: Corpus | None = None) -> LabelSet:
    names: dict[str, int] = {}
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}: line {lineno}: expected 2 tab-separated fields")
            tid, name = parts
            if corpus is not None and tid not in corpus:
                raise GraphFormatError(f"{path}: line {lineno}: unknown tweet id {tid!r}")
            labels[tid] = names.setdefault(name, len(names))
    return LabelSet(labels, list(names))


def save_records(records: RecordSet, path, ids_path=None) -> None:
    """Binary record file plus a sidecar tweet-id list (one id per line)."""
    path = Path(path)
    ids_path = Path(ids_path) if ids_path else path.with_suffix(".ids")
    id_list = sorted(set(records.tweet_ids))
    pos = {t: i for i, t in enumerate(id_list)}
    n, dim = records.user_vecs.shape
    buf = bytearray(REC_MAGIC)
    buf += struct.pack("<II", n, dim)
    vecs = records.user_vecs.astype("<f4")
    for i, tid in enumerate(records.tweet_ids):
        buf += struct.pack("<I", pos[tid])
        buf += vecs[i].tobytes()
    path.write_bytes(bytes(buf))
    ids_path.write_text("".join(t + "\n" for t in id_list), encoding="utf-8")


def load_records(path, ids_path=None) -> RecordSet:
    path = Path(path)
    ids_path = Path(ids_path) if ids_path else path.with_suffix(".ids")
    data = path.read_bytes()
    if not data.startswith(REC_MAGIC):
        raise GraphFormatError(f"{path}: bad magic")
    off = len(REC_MAGIC)
    n, dim = struct.unpack_from("<II", data, off)
    off += 8
    id_list = ids_path.read_text(encoding="utf-8").splitlines()
    rec = np.dtype([("idx", "<u4"), ("vec", "<f4", (dim,))])
    if len(data) - off != n * rec.itemsize:
        raise GraphFormatError(f"{path}: truncated record file")
    arr = np.frombuffer(data, dtype=rec, count=n, offset=off)
    return RecordSet(arr["vec"].astype(np.float64), [id_list[i] for i in arr["idx"]])


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


@dataclass
class WorldConfig:
    n_topics: int = 2
    n_users: int = 200
    n_tweets: int = 400
    vocab_size: int = 300
    tokens_per_tweet: int = 12
    noise_rate: float = 0.05
    relations: tuple[str, ...] = ("fave", "retweet", "reply")
    relation_weights: tuple[float, ...] | None = None
    # finer engagement structure nested inside each topic
    communities_per_topic: int = 4
    community_affinity: float = 0.9
    edges_per_user: int = 30
    popularity_sigma: float = 0.5
    activity_sigma: float = 0.0
    # share of a tweet's tokens drawn from its topic slice; rest is background
    topic_token_rate: float = 0.5
    # within topic tokens, share drawn from the community's own sub-slice
    community_token_rate: float = 0.5
    # nuisance structure: each tweet has a style, and this share of its
    # background tokens comes from the style's sub-slice (0 groups = off)
    style_groups: int = 0
    style_token_rate: float = 0.0
    user_dim: int = 16
    user_noise: float = 0.5
    community_spread: float = 1.0
    n_records: int = 0  # 0 -> 4 * n_tweets

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "relations" in d:
            d["relations"] = tuple(d["relations"])
        if d.get("relation_weights") is not None:
            d["relation_weights"] = tuple(d["relation_weights"])
        return cls(**d)

    def validate(self):
        if self.n_topics < 2:
            raise ValueError("n_topics must be >= 2")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if self.vocab_size <= self.n_topics:
            raise ValueError("vocab_size must exceed n_topics")
        if self.n_tweets < self.n_topics * self.communities_per_topic:
            raise ValueError("n_tweets must cover every topic and community")
        if self.n_users < self.n_topics:
            raise ValueError("n_users must be >= n_topics")
        if self.communities_per_topic < 1 or self.tokens_per_tweet < 1:
            raise ValueError("communities_per_topic and tokens_per_tweet must be >= 1")
        if not self.relations or len(set(self.relations)) != len(self.relations):
            raise ValueError("relations must be non-empty and unique")
        if self.relation_weights is not None and len(self.relation_weights) != len(self.relations):
            raise ValueError("relation_weights must match relations")
        if self.vocab_size // (self.n_topics + 1) < self.communities_per_topic:
            raise ValueError("vocab_size too small for the topic/community slices")
        if self.style_groups < 0 or not 0.0 <= self.style_token_rate <= 1.0:
            raise ValueError("style_groups must be >= 0 and style_token_rate in [0, 1]")
        if self.style_groups > self.vocab_size - self.n_topics * (self.vocab_size // (self.n_topics + 1)):
            raise ValueError("more style groups than background words")


@dataclass
class World:
    graph: EngagementGraph
    corpus: Corpus
    labels: LabelSet
    records: RecordSet
    tweet_topic: np.ndarray = field(repr=False)
    tweet_community: np.ndarray = field(repr=False)
    user_topic: np.ndarray = field(repr=False)
    user_community: np.ndarray = field(repr=False)

    def __iter__(self):
        # (graph, corpus, labels, records) unpacking
        return iter((self.graph, self.corpus, self.labels, self.records))

    def serialize(self) -> bytes:
        """Canonical byte form, used for determinism checks."""
        parts = [
            "\n".join("\t".join(e) for e in self.graph.edge_triples()).encode(),
            json.dumps(list(zip(self.corpus.ids, self.corpus.texts))).encode(),
            json.dumps(sorted(self.labels.labels.items())).encode(),
            self.records.user_vecs.tobytes(),
            "\n".join(self.records.tweet_ids).encode(),
        ]
        return b"\x00".join(parts)


def _pick(rng, pool: np.ndarray, weights: np.ndarray) -> int:
    p = weights[pool]
    return int(pool[rng.choice(pool.size, p=p / p.sum())])


def generate_synthetic_world(config: WorldConfig | dict, seed: int) -> World:
    """Build a planted world: topical text, community-structured engagement.

    Tweets carry a topic (the class label) and a community nested in that
    topic. Users share the same structure and engage within their topic with
    probability ``1 - noise_rate``; inside the topic, their own community is
    preferred with probability ``community_affinity``. Tweet popularity is
    log-normal. Text tokens come from the tweet's topic slice of the
    vocabulary (biased towards the community sub-slice) or from a shared
    background slice.
    """
    cfg = WorldConfig.from_dict(config) if isinstance(config, dict) else config
    cfg.validate()
    rng = np.random.default_rng(seed)
    K, C = cfg.n_topics, cfg.communities_per_topic
    n_groups = K * C

    tweet_group = np.arange(cfg.n_tweets) % n_groups
    rng.shuffle(tweet_group)
    tweet_topic = tweet_group // C
    tweet_comm = tweet_group % C
    popularity = rng.lognormal(0.0, cfg.popularity_sigma, cfg.n_tweets)

    user_group = np.arange(cfg.n_users) % n_groups
    rng.shuffle(user_group)
    user_topic = user_group // C
    user_comm = user_group % C

    by_group = [np.flatnonzero(tweet_group == g) for g in range(n_groups)]
    by_topic = [np.flatnonzero(tweet_topic == k) for k in range(K)]
    off_topic = [np.flatnonzero(tweet_topic != k) for k in range(K)]

    def draw_tweet(topic, comm):
        if rng.random() < cfg.noise_rate:
            return _pick(rng, off_topic[topic], popularity)
        if C == 1 or rng.random() < cfg.community_affinity:
            return _pick(rng, by_group[topic * C + comm], popularity)
        pool = by_topic[topic]
        pool = pool[tweet_comm[pool] != comm]
        return _pick(rng, pool, popularity)

    # per-event emission probability of each relation type on the engaged tweet
    if cfg.relation_weights is None:
        rel_p = np.array([0.9] + [0.3] * (len(cfg.relations) - 1))
    else:
        rel_p = np.clip(np.asarray(cfg.relation_weights, dtype=np.float64), 0.0, 1.0)

    activity = rng.lognormal(0.0, cfg.activity_sigma, cfg.n_users)
    activity *= max(cfg.edges_per_user - 1, 0) / activity.mean()
    edges = []
    for u in range(cfg.n_users):
        n_e = 1 + rng.poisson(activity[u])
        for _ in range(n_e):
            t = draw_tweet(user_topic[u], user_comm[u])
            emitted = np.flatnonzero(rng.random(rel_p.size) < rel_p)
            if emitted.size == 0:
                emitted = [int(np.argmax(rel_p))]
            edges.extend((u, t, int(r)) for r in emitted)

    # vocabulary slices: K topic slices (each split into C community parts) + background
    V = cfg.vocab_size
    s = V // (K + 1)
    background = np.arange(K * s, V)
    words = [f"w{j}" for j in range(V)]
    # styles use their own stream so worlds without them are unchanged
    srng = np.random.default_rng([seed, 1])
    style_slices = np.array_split(background, max(cfg.style_groups, 1))
    tweet_style = srng.integers(0, max(cfg.style_groups, 1), cfg.n_tweets)
    texts = []
    for i in range(cfg.n_tweets):
        k, c = tweet_topic[i], tweet_comm[i]
        topic_slice = np.arange(k * s, (k + 1) * s)
        comm_slice = np.array_split(topic_slice, C)[c]
        toks = []
        for _ in range(cfg.tokens_per_tweet):
            x = rng.random()
            if x < cfg.topic_token_rate * cfg.community_token_rate:
                toks.append(words[rng.choice(comm_slice)])
            elif x < cfg.topic_token_rate:
                toks.append(words[rng.choice(topic_slice)])
            elif cfg.style_groups and srng.random() < cfg.style_token_rate:
                toks.append(words[rng.choice(style_slices[tweet_style[i]])])
            else:
                toks.append(words[rng.choice(background)])
        texts.append(" ".join(toks))

    user_ids = tuple(f"u{j:05d}" for j in range(cfg.n_users))
    tweet_ids = tuple(f"t{i:05d}" for i in range(cfg.n_tweets))
    graph = EngagementGraph(user_ids, tweet_ids, cfg.relations, np.array(edges, dtype=np.int64))
    corpus = Corpus(list(tweet_ids), texts)
    labels = LabelSet({tweet_ids[i]: int(tweet_topic[i]) for i in range(cfg.n_tweets)},
                      [f"topic{k}" for k in range(K)])

    # held-out engagement records: fresh users, one record each
    topic_means = rng.normal(0.0, 1.0, (K, cfg.user_dim))
    comm_offsets = rng.normal(0.0, cfg.community_spread, (K, C, cfg.user_dim))
    n_rec = cfg.n_records or 4 * cfg.n_tweets
    rec_topic = rng.integers(0, K, n_rec)
    rec_comm = rng.integers(0, C, n_rec)
    vecs = (topic_means[rec_topic] + comm_offsets[rec_topic, rec_comm]
            + rng.normal(0.0, cfg.user_noise, (n_rec, cfg.user_dim)))
    rec_tweets = [tweet_ids[draw_tweet(rec_topic[i], rec_comm[i])] for i in range(n_rec)]
    records = RecordSet(vecs, rec_tweets)

    return World(graph, corpus, labels, records, tweet_topic, tweet_comm, user_topic, user_comm)


# ---------------------------------------------------------------------------
# Splits and statistics
# ---------------------------------------------------------------------------


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if any(r <= 0 for r in ratios):
        raise ValueError("every split ratio must be > 0")
    sizes = [int(round(r * n)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError("split ratios produce a negative split")
    return sizes


def split_engagements(data, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Split by tweet; records and edges follow their tweet.

    ``data`` is an :class:`EngagementGraph`, a :class:`RecordSet`, or a
    sequence of tweet ids (in which case three id lists are returned).
    """
    if isinstance(data, EngagementGraph):
        tweets = list(data.tweet_ids)
    elif isinstance(data, RecordSet):
        tweets = sorted(set(data.tweet_ids))
    else:
        tweets = list(data)
    sizes = split_sizes(len(tweets), ratios)
    perm = np.random.default_rng(seed).permutation(len(tweets))
    groups, start = [], 0
    for sz in sizes:
        groups.append([tweets[i] for i in perm[start:start + sz]])
        start += sz

    if isinstance(data, EngagementGraph):
        out = []
        for g in groups:
            gset = set(g)
            keep = [i for i, t in enumerate(data.tweet_ids) if t in gset]
            remap = np.full(data.n_tweets, -1, np.int64)
            remap[keep] = np.arange(len(keep))
            e = data.edges[remap[data.edges[:, 1]] >= 0].copy()
            e[:, 1] = remap[e[:, 1]]
            out.append(EngagementGraph(data.user_ids, tuple(data.tweet_ids[i] for i in keep),
                                       data.relations, e))
        return tuple(out)
    if isinstance(data, RecordSet):
        out = []
        for g in groups:
            gset = set(g)
            out.append(data.subset([t in gset for t in data.tweet_ids]))
        return tuple(out)
    return tuple(groups)


def graph_stats(graph: EngagementGraph) -> dict:
    per_rel = Counter({name: 0 for name in graph.relations})
    per_rel.update(graph.relations[r] for r in graph.edges[:, 2])
    u_deg = np.bincount(graph.edges[:, 0], minlength=graph.n_users)
    t_deg = np.bincount(graph.edges[:, 1], minlength=graph.n_tweets)
    return {
        "n_users": graph.n_users,
        "n_tweets": graph.n_tweets,
        "n_edges": graph.n_edges,
        "n_relations": len(graph.relations),
        "per_relation": per_rel,
        "user_degree_hist": Counter(u_deg.tolist()),
        "tweet_degree_hist": Counter(t_deg.tolist()),
    }
