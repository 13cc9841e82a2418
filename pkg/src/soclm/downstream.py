"""Evaluation surface: frozen tweet features, engagement prediction with
HITS@k, linear classifiers on features, fine-tuning and supervision sweeps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .encoder import EncoderConfig, Tokenizer, collate, encoder_backward, encoder_forward, pool
from .graph import RecordSet
from .pretrain import AdamState, adam_update, clip_grads, softmax_cross_entropy

log = logging.getLogger(__name__)

POOLINGS = ("cls", "mean", "combined")


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def embed_tweets(params, cfg: EncoderConfig, tokenizer: Tokenizer, texts, pooling: str = "combined",
                 batch_size: int = 256) -> np.ndarray:
    """Row-aligned frozen features for ``texts``."""
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}")
    seqs = [tokenizer.tokenize(t) for t in texts]
    width = cfg.d_model * (2 if pooling == "combined" else 1)
    out = np.zeros((len(seqs), width))
    for s in range(0, len(seqs), batch_size):
        b = collate(seqs[s:s + batch_size])
        res = encoder_forward(params, cfg, b, keep_cache=False)
        out[s:s + batch_size] = pool(res.hidden, b, pooling)
    return out


def nearest_centroid_accuracy(features, labels, train_mask) -> float:
    """Cosine nearest-class-mean probe fitted on ``train_mask`` rows, scored on the rest."""
    X = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    labels = np.asarray(labels)
    classes = np.unique(labels[train_mask])
    cent = np.stack([X[train_mask & (labels == c)].mean(0) for c in classes])
    pred = classes[np.argmax(X[~train_mask] @ cent.T, axis=1)]
    return float(np.mean(pred == labels[~train_mask]))


# ---------------------------------------------------------------------------
# Engagement prediction
# ---------------------------------------------------------------------------


@dataclass
class NegativeDistribution:
    rows: np.ndarray  # feature-row index per candidate tweet
    weights: np.ndarray

    @classmethod
    def from_counts(cls, rows, counts, power: float = 0.75) -> "NegativeDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0 or np.any(counts < 0) or counts.sum() == 0:
            raise ValueError("need at least one positive frequency")
        w = counts ** power
        return cls(np.asarray(rows, dtype=np.int64), w / w.sum())

    @classmethod
    def from_rows(cls, engaged_rows, power: float = 0.75) -> "NegativeDistribution":
        rows, counts = np.unique(np.asarray(engaged_rows, dtype=np.int64), return_counts=True)
        return cls.from_counts(rows, counts, power)

    def sample(self, rng, size) -> np.ndarray:
        return self.rows[rng.choice(self.rows.size, size=size, p=self.weights)]


@dataclass
class EngagementPredictor:
    W_u: np.ndarray  # d_u x d_p
    W_t: np.ndarray  # d_e x d_p

    @classmethod
    def init(cls, d_u: int, d_e: int, d_p: int = 128, seed: int = 0) -> "EngagementPredictor":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / np.sqrt(d_u), (d_u, d_p)),
                   rng.normal(0, 1 / np.sqrt(d_e), (d_e, d_p)))

    @property
    def d_p(self) -> int:
        return self.W_u.shape[1]

    def user_proj(self, U):
        return np.asarray(U, dtype=np.float64) @ self.W_u

    def tweet_proj(self, T):
        return np.asarray(T, dtype=np.float64) @ self.W_t


def predict_engagement(model: EngagementPredictor, user_vec, tweet_feature) -> float:
    u = np.asarray(user_vec, dtype=np.float64)
    t = np.asarray(tweet_feature, dtype=np.float64)
    if u.shape != (model.W_u.shape[0],) or t.shape != (model.W_t.shape[0],):
        raise ValueError("feature dimensions do not match the model")
    return float(_sigmoid(model.user_proj(u) @ model.tweet_proj(t)))


def engagement_loss_and_grads(model: EngagementPredictor, U, T_pos, T_neg):
    """Mean over records of -log s(h_u.h_t) - sum_k log s(-h_u.h_t'_k).

    U: (n, d_u); T_pos: (n, d_e); T_neg: (n, K, d_e).
    """
    n = U.shape[0]
    hu = U @ model.W_u
    hp = T_pos @ model.W_t
    hn = T_neg @ model.W_t
    sp = np.einsum("nd,nd->n", hu, hp)
    sn = np.einsum("nd,nkd->nk", hu, hn)
    loss = -(_log_sigmoid(sp).sum() + _log_sigmoid(-sn).sum()) / n
    gp = (_sigmoid(sp) - 1.0) / n  # dL/ds_pos
    gn = _sigmoid(sn) / n  # dL/ds_neg
    d_hu = gp[:, None] * hp + np.einsum("nk,nkd->nd", gn, hn)
    d_hp = gp[:, None] * hu
    d_hn = gn[:, :, None] * hu[:, None, :]
    dW_u = U.T @ d_hu
    dW_t = T_pos.T @ d_hp + np.einsum("nke,nkd->ed", T_neg, d_hn)
    return float(loss), {"W_u": dW_u, "W_t": dW_t}


@dataclass
class EngagementTrainConfig:
    d_p: int = 128
    batch: int = 512
    lr: float = 1e-3
    negatives: int = 5
    epochs: int = 10
    seed: int = 0
    n_candidates: int = 1000
    k: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "EngagementTrainConfig":
        return cls(**d)


def train_engagement_model(features, records: RecordSet, row_of: dict, cfg: EngagementTrainConfig,
                           dev: RecordSet | None = None, dev_pool=None):
    """Train W_u, W_t by negative sampling from the 3/4-power record distribution.

    ``row_of`` maps tweet id to a row of ``features``. With ``dev`` given, the
    epoch with the best dev HITS@k is returned. Returns ``(model, history)``.
    """
    if len(records) == 0:
        raise ValueError("no engagement records to train on")
    rng = np.random.default_rng(cfg.seed)
    F = np.asarray(features, dtype=np.float64)
    U = records.user_vecs.astype(np.float64)
    rows = np.array([row_of[t] for t in records.tweet_ids], dtype=np.int64)
    negdist = NegativeDistribution.from_rows(rows)
    model = EngagementPredictor.init(U.shape[1], F.shape[1], cfg.d_p, cfg.seed)
    params = {"W_u": model.W_u, "W_t": model.W_t}
    opt = AdamState()
    best, best_score, history = None, -1.0, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(rows))
        total = 0.0
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            neg = negdist.sample(rng, (idx.size, cfg.negatives))
            loss, grads = engagement_loss_and_grads(model, U[idx], F[rows[idx]], F[neg])
            adam_update(params, grads, opt, cfg.lr)
            total += loss * idx.size
        entry = {"epoch": epoch, "loss": total / len(rows)}
        if dev is not None:
            pool_rows = dev_pool if dev_pool is not None else np.unique([row_of[t] for t in dev.tweet_ids])
            n_cand = min(cfg.n_candidates, len(pool_rows))
            entry["dev_hits"] = hits_at_k(model, dev, F, row_of, pool_rows, n_cand, cfg.k, cfg.seed)
            if entry["dev_hits"] > best_score:
                best_score = entry["dev_hits"]
                best = EngagementPredictor(model.W_u.copy(), model.W_t.copy())
        history.append(entry)
    return (best if best is not None else model), history


def hits_from_scores(pos_scores, neg_scores, k: int = 10) -> np.ndarray:
    """Per-record hit flags; a negative tying the positive outranks it."""
    pos = np.asarray(pos_scores)[:, None]
    rank = 1 + np.sum(np.asarray(neg_scores) >= pos, axis=1)
    return rank <= k


def sample_candidates(pos_rows, pool_rows, n_candidates: int, rng) -> np.ndarray:
    """(n, n_candidates) rows; column 0 holds the positive, the rest distinct pool negatives."""
    pool_rows = np.asarray(pool_rows, dtype=np.int64)
    if pool_rows.size < n_candidates:
        raise ValueError(f"candidate pool has {pool_rows.size} tweets, need {n_candidates}")
    out = np.empty((len(pos_rows), n_candidates), dtype=np.int64)
    for i, p in enumerate(pos_rows):
        others = pool_rows[pool_rows != p]
        out[i, 0] = p
        out[i, 1:] = rng.choice(others, n_candidates - 1, replace=False)
    return out


Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def hits_at_k(model: EngagementPredictor | Scorer, records: RecordSet, features, row_of: dict,
              pool_rows, n_candidates: int = 1000, k: int = 10, seed: int = 0) -> float:
    """Mean HITS@k with per-record resampled negatives.

    ``model`` is a predictor or a callable ``(user_vecs, cand_rows) -> scores``
    where column 0 of ``cand_rows`` is the positive.
    """
    rng = np.random.default_rng(seed)
    pos_rows = np.array([row_of[t] for t in records.tweet_ids], dtype=np.int64)
    cands = sample_candidates(pos_rows, pool_rows, n_candidates, rng)
    if isinstance(model, EngagementPredictor):
        hu = model.user_proj(records.user_vecs)
        ht = model.tweet_proj(features)
        scores = np.einsum("nd,nmd->nm", hu, ht[cands])
    else:
        scores = np.asarray(model(records.user_vecs, cands), dtype=np.float64)
    return float(np.mean(hits_from_scores(scores[:, 0], scores[:, 1:], k)))


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def macro_f1(predictions, labels, classes=None) -> float:
    """Unweighted mean per-class F1 over ``classes`` (default: union of observed)."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if classes is None:
        classes = np.union1d(p, y)
    f1 = []
    for c in classes:
        tp = np.sum((p == c) & (y == c))
        denom = np.sum(p == c) + np.sum(y == c)
        f1.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(f1)) if f1 else 0.0


@dataclass
class LinearClassifier:
    W: np.ndarray  # C x d
    b: np.ndarray  # C

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, X):
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b

    def predict_proba(self, X):
        z = self.logits(X)
        z -= z.max(1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)


def lr_objective(theta, X, y, n_classes: int, l2: float):
    """Mean cross-entropy + (l2/2)|W|^2 and its gradient; theta packs [W, b]."""
    d = X.shape[1]
    W = theta[: n_classes * d].reshape(n_classes, d)
    b = theta[n_classes * d:]
    loss, dlog = softmax_cross_entropy(X @ W.T + b, y)
    loss += 0.5 * l2 * float(np.sum(W * W))
    dW = dlog.T @ X + l2 * W
    return loss, np.concatenate([dW.ravel(), dlog.sum(0)])


def train_feature_classifier(features, labels, l2: float = 1e-4, tol: float = 1e-6,
                             max_iter: int = 2000, n_classes: int | None = None) -> LinearClassifier:
    """Multinomial logistic regression on fixed features (L-BFGS)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("need at least two classes")
    C = n_classes or int(y.max()) + 1
    theta0 = np.zeros(C * X.shape[1] + C)
    res = minimize(lr_objective, theta0, args=(X, y, C, l2), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 1e-12, "maxiter": max_iter})
    W = res.x[: C * X.shape[1]].reshape(C, -1)
    return LinearClassifier(W, res.x[C * X.shape[1]:])


@dataclass
class FinetuneConfig:
    epochs: int = 5
    lr: float = 1e-4
    batch: int = 32
    seed: int = 0
    pooling: str = "cls"
    clip_norm: float = 1.0
    l2: float = 1e-4

    def __post_init__(self):
        if not 1 <= self.epochs <= 30:
            raise ValueError("fine-tuning needs between 1 and 30 epochs")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")


def _pool_backward(d_feat, batch, mode, d_model):
    """Route pooled-feature gradients back to (d_hidden, d_cls)."""
    B, S = batch.ids.shape
    d_hidden = np.zeros((B, S, d_model))
    d_cls = None
    if mode in ("cls", "combined"):
        d_cls = d_feat[:, :d_model]
    if mode in ("mean", "combined"):
        dm = d_feat[:, -d_model:]
        keep = batch.mask & ~batch.special
        cnt = keep.sum(1, keepdims=True)
        w = np.where(cnt > 0, keep / np.maximum(cnt, 1), 0.0)
        d_hidden += w[:, :, None] * dm[:, None, :]
    return d_hidden, d_cls


def finetune_classifier(params, cfg: EncoderConfig, tokenizer: Tokenizer, train_texts, train_y,
                        dev_texts, dev_y, ft: FinetuneConfig, n_classes: int | None = None):
    """End-to-end encoder + linear head training with per-epoch dev selection.

    The head starts from the logistic-regression solution on the frozen
    features. Returns ``(params, head, history)`` for the best dev epoch.
    """
    if len(dev_texts) == 0:
        raise ValueError("dev set is empty; epoch selection needs it")
    train_y = np.asarray(train_y, dtype=np.int64)
    dev_y = np.asarray(dev_y, dtype=np.int64)
    C = n_classes or int(max(train_y.max(), dev_y.max())) + 1
    rng = np.random.default_rng(ft.seed)
    params = {k: v.copy() for k, v in params.items()}
    feats = embed_tweets(params, cfg, tokenizer, train_texts, ft.pooling)
    head = train_feature_classifier(feats, train_y, l2=ft.l2, n_classes=C)
    seqs = [tokenizer.tokenize(t) for t in train_texts]
    opt = AdamState()
    best = None
    history = []
    for epoch in range(ft.epochs):
        order = rng.permutation(len(seqs))
        for s in range(0, len(order), ft.batch):
            idx = order[s:s + ft.batch]
            b = collate([seqs[i] for i in idx])
            out = encoder_forward(params, cfg, b)
            f = pool(out.hidden, b, ft.pooling)
            _, dlog = softmax_cross_entropy(head.logits(f), train_y[idx])
            grads = {"head_W": dlog.T @ f, "head_b": dlog.sum(0)}
            d_hidden, d_cls = _pool_backward(dlog @ head.W, b, ft.pooling, cfg.d_model)
            grads.update(encoder_backward(params, cfg, out.cache, d_hidden, d_cls))
            clip_grads(grads, ft.clip_norm)
            state = dict(params, head_W=head.W, head_b=head.b)
            adam_update(state, grads, opt, ft.lr)
        pred = head.predict(embed_tweets(params, cfg, tokenizer, dev_texts, ft.pooling))
        f1 = macro_f1(pred, dev_y, classes=np.arange(C))
        history.append({"epoch": epoch, "dev_macro_f1": f1})
        if best is None or f1 > best[0]:
            best = (f1, {k: v.copy() for k, v in params.items()},
                    LinearClassifier(head.W.copy(), head.b.copy()))
    return best[1], best[2], history


def per_class_subsample(labels, budget: int, rng) -> np.ndarray:
    """Indices holding at most ``budget`` examples of each class."""
    labels = np.asarray(labels)
    pick = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        pick.extend(rng.choice(idx, min(budget, idx.size), replace=False))
    return np.sort(np.array(pick, dtype=np.int64))


def supervision_sweep(train_X, train_y, test_X, test_y, budgets=(2, 8, 32), n_runs: int = 3,
                      seed: int = 0, l2: float = 1e-4) -> list[dict]:
    """Feature-based macro-F1 at each per-class budget; median over runs."""
    C = int(max(np.max(train_y), np.max(test_y))) + 1
    table = []
    for budget in budgets:
        scores = []
        for run in range(n_runs):
            rng = np.random.default_rng([seed, budget, run])
            idx = per_class_subsample(train_y, budget, rng)
            if np.unique(np.asarray(train_y)[idx]).size < 2:
                raise ValueError("budget leaves fewer than two classes")
            clf = train_feature_classifier(train_X[idx], np.asarray(train_y)[idx], l2=l2, n_classes=C)
            scores.append(macro_f1(clf.predict(test_X), test_y, classes=np.arange(C)))
        table.append({"budget": budget, "runs": scores, "median": float(np.median(scores))})
    return table


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    model: str
    pooling: str
    seed: int
    metric_name: str
    value: float
    n_runs: int = 1
    median: float | None = None
    runs: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        if self.median is None:
            d["median"] = self.value
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def save_sweep_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "median", "runs"])
        for row in table:
            w.writerow([row["budget"], f"{row['median']:.6f}",
                        ";".join(f"{s:.6f}" for s in row["runs"])])
