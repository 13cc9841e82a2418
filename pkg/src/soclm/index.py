"""Inverted-file index with product-quantized residuals, and pair mining.

Vectors are L2-normalised at build time so that squared-L2 ranking agrees
with cosine ranking. The rotation stage of OPQ is the identity here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _binio, kernels

IDX_MAGIC = b"SOCLM-IDX1"


def normalize_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero vector")
    return X / norms


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(n, bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        else:
            # every point coincides with a centre already; pick an unused index
            free = np.flatnonzero(~taken)
            i = int(free[rng.integers(free.size)])
        chosen.append(i)
        taken[i] = True
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return X[chosen].copy()


def _update(X, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    nonempty = counts > 0
    cent = np.zeros_like(sums)
    cent[nonempty] = sums[nonempty] / counts[nonempty, None]
    return cent, counts


def kmeans_fit(vectors, k: int, iters: int = 20, seed: int = 0):
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(centroids, labels, errors)`` where ``errors[i]`` is the total
    squared distance after the i-th assignment step. Stops early once the
    assignment no longer changes.
    """
    X = np.ascontiguousarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    cent = _kmeanspp(X, k, rng)
    labels, d2 = kernels.nearest_centroids(X, cent)
    errors = [float(d2.sum())]
    for _ in range(iters):
        cent, counts = _update(X, labels, k)
        for e in np.flatnonzero(counts == 0):
            # split the largest cluster: its farthest member seeds the empty one
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(np.sum((X[members] - cent[big]) ** 2, axis=1))]
            cent[e] = X[far]
            counts[big] -= 1
            counts[e] = 1
        new_labels, d2 = kernels.nearest_centroids(X, cent)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        errors.append(float(d2.sum()))
    return cent, labels, errors


def kmeans(vectors, k: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    return kmeans_fit(vectors, k, iters, seed)[0]


# ---------------------------------------------------------------------------
# Product quantisation
# ---------------------------------------------------------------------------


@dataclass
class PQCodebooks:
    codebooks: np.ndarray  # (m, k_codes, dsub)

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def k_codes(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dim(self) -> int:
        return self.codebooks.shape[0] * self.codebooks.shape[2]

    def code_dtype(self):
        return np.uint8 if self.k_codes <= 256 else np.uint16


def train_pq(vectors, m: int, k_codes: int, iters: int = 20, seed: int = 0) -> PQCodebooks:
    X = np.asarray(vectors, dtype=np.float64)
    d = X.shape[1]
    if m < 1 or d % m:
        raise ValueError(f"dimension {d} is not divisible by m={m}")
    if k_codes < 1:
        raise ValueError("k_codes must be >= 1")
    ds = d // m
    books = np.stack([kmeans(X[:, s * ds:(s + 1) * ds], k_codes, iters, seed + s)
                      for s in range(m)])
    return PQCodebooks(books)


def pq_encode(vectors, codebooks: PQCodebooks) -> np.ndarray:
    """Per-subspace nearest codeword; returns (n, m) codes (or (m,) for one vector)."""
    X = np.asarray(vectors, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    m, _, ds = codebooks.codebooks.shape
    if X.shape[1] != m * ds:
        raise ValueError(f"vector dimension {X.shape[1]} != codebook dimension {m * ds}")
    codes = np.empty((X.shape[0], m), codebooks.code_dtype())
    for s in range(m):
        codes[:, s] = kernels.nearest_centroids(
            np.ascontiguousarray(X[:, s * ds:(s + 1) * ds]), codebooks.codebooks[s])[0]
    return codes[0] if single else codes


def pq_decode(codes, codebooks: PQCodebooks) -> np.ndarray:
    c = np.asarray(codes)
    single = c.ndim == 1
    c = np.atleast_2d(c).astype(np.int64)
    m = codebooks.m
    out = np.concatenate([codebooks.codebooks[s][c[:, s]] for s in range(m)], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Inverted-file index
# ---------------------------------------------------------------------------


@dataclass
class IndexConfig:
    n_list: int = 64
    m: int = 8
    k_codes: int = 256
    mode: str = "quantized"  # quantized | exact
    seed: int = 0
    iters: int = 20

    def __post_init__(self):
        if self.mode not in ("quantized", "exact"):
            raise ValueError(f"unknown index mode {self.mode!r}")


@dataclass
class PQIndex:
    centroids: np.ndarray  # (n_list, d)
    assign: np.ndarray  # (n,) list id per indexed vector
    lists: list  # per list: sorted int64 array of vector ids
    mode: str
    codebooks: PQCodebooks | None = None
    codes: np.ndarray | None = None  # (n, m) residual codes, row = vector id
    recon_norms: np.ndarray | None = None
    vectors: np.ndarray | None = field(default=None, repr=False)  # exact mode only

    @property
    def n_list(self) -> int:
        return self.centroids.shape[0]

    @property
    def size(self) -> int:
        return self.assign.shape[0]

    def reconstruct(self, ids=None) -> np.ndarray:
        """Approximate (quantized) or stored (exact) vectors for ``ids``."""
        ids = np.arange(self.size) if ids is None else np.asarray(ids)
        if self.mode == "exact":
            return self.vectors[ids]
        return self.centroids[self.assign[ids]] + pq_decode(self.codes[ids], self.codebooks)


def build_index(tweet_vecs, cfg: IndexConfig | None = None) -> PQIndex:
    cfg = cfg or IndexConfig()
    X = normalize_rows(tweet_vecs)
    n = X.shape[0]
    if cfg.n_list > n:
        raise ValueError(f"n_list={cfg.n_list} exceeds the number of vectors ({n})")
    cent = kmeans(X, cfg.n_list, cfg.iters, cfg.seed)
    assign, _ = kernels.nearest_centroids(X, cent)
    lists = [np.flatnonzero(assign == c) for c in range(cfg.n_list)]
    if cfg.mode == "exact":
        return PQIndex(cent, assign, lists, "exact", vectors=X)
    resid = X - cent[assign]
    books = train_pq(resid, cfg.m, cfg.k_codes, cfg.iters, cfg.seed + 1)
    codes = pq_encode(resid, books)
    recon = cent[assign] + pq_decode(codes, books)
    norms = np.linalg.norm(recon, axis=1)
    norms[norms == 0] = 1.0
    return PQIndex(cent, assign, lists, "quantized", books, codes, norms)


def _probe(index: PQIndex, q: np.ndarray, nprobe: int) -> np.ndarray:
    d2 = np.sum((index.centroids - q) ** 2, axis=1)
    return np.lexsort((np.arange(d2.size), d2))[:nprobe]


def search(index: PQIndex, query_vec, k: int, nprobe: int):
    """Return ``(ids, cosine_distances)`` of the k nearest indexed vectors.

    Exact mode computes true cosine distance; quantized mode computes the
    cosine distance between the raw query and each reconstructed vector
    (asymmetric). Ties are broken by ascending id.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if not 1 <= nprobe <= index.n_list:
        raise ValueError(f"nprobe must lie in [1, {index.n_list}]")
    q = normalize_rows(query_vec)
    probes = _probe(index, q, nprobe)
    cands = np.concatenate([index.lists[p] for p in probes])
    if cands.size == 0:
        return np.empty(0, np.int64), np.empty(0)
    if index.mode == "exact":
        dist = 1.0 - np.sum(index.vectors[cands] * q, axis=1)
    else:
        books = index.codebooks.codebooks
        m, kc, ds = books.shape
        lut = np.einsum("skd,sd->sk", books, q.reshape(m, ds))
        coarse_ip = index.centroids @ q
        ip = coarse_ip[index.assign[cands]] + kernels.adc_scan(lut, index.codes[cands])
        dist = 1.0 - ip / index.recon_norms[cands]
    dist = np.clip(dist, 0.0, 2.0)
    order = np.lexsort((cands, dist))[:k]
    return cands[order], dist[order]


@dataclass
class SimilarPairSet:
    """Unordered tweet pairs (i < j) with cosine distance."""

    i: np.ndarray
    j: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return int(self.i.shape[0])

    def __iter__(self):
        return zip(self.i.tolist(), self.j.tolist(), self.dist.tolist())


def mine_pairs(index: PQIndex, tweet_vecs, k: int = 5, nprobe: int = 16,
               max_distance: float | None = None) -> SimilarPairSet:
    """Query every tweet with its own vector and keep its k nearest non-self hits.

    A pair found from both endpoints is emitted once with the smaller distance.
    """
    X = np.asarray(tweet_vecs, dtype=np.float64)
    best: dict[tuple[int, int], float] = {}
    for a in range(X.shape[0]):
        ids, dist = search(index, X[a], k + 1, nprobe)
        keep = ids != a
        for b, dd in zip(ids[keep][:k].tolist(), dist[keep][:k].tolist()):
            if max_distance is not None and dd > max_distance:
                continue
            key = (a, b) if a < b else (b, a)
            if key not in best or dd < best[key]:
                best[key] = dd
    if not best:
        return SimilarPairSet(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    keys = np.array(list(best), dtype=np.int64)
    dist = np.array(list(best.values()))
    order = np.lexsort((keys[:, 1], dist, keys[:, 0]))
    return SimilarPairSet(keys[order, 0], keys[order, 1], dist[order])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_pairs(pairs: SimilarPairSet, tweet_ids, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, d in pairs:
            fh.write(f"{tweet_ids[a]}\t{tweet_ids[b]}\t{d:.6f}\n")


def load_pairs(path, tweet_ids) -> SimilarPairSet:
    pos = {t: i for i, t in enumerate(tweet_ids)}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            a, b, d = parts
            if a not in pos or b not in pos:
                raise KeyError(f"{path}: line {lineno}: unknown tweet id")
            rows.append((pos[a], pos[b], float(d)))
    if not rows:
        return SimilarPairSet(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    i, j, d = zip(*rows)
    return SimilarPairSet(np.array(i, np.int64), np.array(j, np.int64), np.array(d))


def save_index(index: PQIndex, path) -> None:
    header = {"mode": index.mode, "n_list": index.n_list, "size": index.size}
    tensors = {"centroids": index.centroids, "assign": index.assign.astype(np.int64)}
    if index.mode == "exact":
        tensors["vectors"] = index.vectors
    else:
        tensors["codebooks"] = index.codebooks.codebooks
        tensors["codes"] = index.codes
        tensors["recon_norms"] = index.recon_norms
    _binio.dump(path, IDX_MAGIC, header, tensors)


def load_index(path) -> PQIndex:
    header, t = _binio.load(path, IDX_MAGIC)
    assign = t["assign"]
    lists = [np.flatnonzero(assign == c) for c in range(header["n_list"])]
    if header["mode"] == "exact":
        return PQIndex(t["centroids"], assign, lists, "exact", vectors=t["vectors"])
    return PQIndex(t["centroids"], assign, lists, "quantized", PQCodebooks(t["codebooks"]),
                   t["codes"], t["recon_norms"])
