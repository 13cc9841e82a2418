"""Masked-language and contrastive social objectives, and the two training stages."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import (MASK_ID, N_SPECIAL, Batch, EncoderConfig, Tokenizer, collate,
                      encoder_backward, encoder_forward, init_params, project,
                      project_backward, softmax)

log = logging.getLogger(__name__)


@dataclass
class MaskPolicy:
    prob: float = 0.15
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # [MASK] / random / keep

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0 or any(not 0.0 <= s <= 1.0 for s in self.split):
            raise ValueError("mask probabilities must lie in [0, 1]")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("mask action split must sum to 1")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    batch_pairs: int = 32

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")


@dataclass
class JointLossConfig:
    lam: float = 0.05
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float = 1.0
    stage: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def mask_batch(batch: Batch, policy: MaskPolicy, rng, vocab_size: int):
    """Select non-special tokens with ``policy.prob`` and corrupt them.

    Returns ``(masked_batch, positions, targets)`` where positions is an
    (n, 2) array of (row, column) and targets the original ids there.
    """
    ids = batch.ids
    maskable = batch.mask & ~batch.special
    selected = maskable & (rng.random(ids.shape) < policy.prob)
    action = rng.random(ids.shape)
    random_ids = rng.integers(N_SPECIAL, vocab_size, ids.shape) if vocab_size > N_SPECIAL else ids
    out = ids.copy()
    p_mask, p_rand, _ = policy.split
    to_mask = selected & (action < p_mask)
    to_rand = selected & (action >= p_mask) & (action < p_mask + p_rand)
    out[to_mask] = MASK_ID
    out[to_rand] = random_ids[to_rand]
    positions = np.argwhere(selected)
    return Batch(out, batch.mask), positions, ids[selected]


def mask_tokens(seq, policy: MaskPolicy, rng, vocab_size: int):
    """Single-sequence form: returns (masked ids, {position: original id})."""
    b = collate([seq])
    masked, pos, tgt = mask_batch(b, policy, rng, vocab_size)
    return masked.ids[0], {int(c): int(t) for (_, c), t in zip(pos, tgt)}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    m = logits.max(-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(-1))
    loss = float(np.mean(lse - logits[np.arange(n), targets]))
    d = softmax(logits)
    d[np.arange(n), targets] -= 1.0
    return loss, d / n


def mlm_loss(hidden, positions, targets, params):
    """Mean cross-entropy at masked positions through the tied output layer.

    Returns ``(loss, d_hidden, head_grads)``; zero targets give a zero loss.
    """
    d_hidden = np.zeros_like(hidden)
    grads = {"tok_emb": np.zeros_like(params["tok_emb"]),
             "mlm_bias": np.zeros_like(params["mlm_bias"])}
    if len(targets) == 0:
        return 0.0, d_hidden, grads
    rows, cols = positions[:, 0], positions[:, 1]
    h = hidden[rows, cols]
    logits = h @ params["tok_emb"].T + params["mlm_bias"]
    loss, dlog = softmax_cross_entropy(logits, targets)
    d_hidden[rows, cols] = dlog @ params["tok_emb"]
    grads["tok_emb"] = dlog.T @ h
    grads["mlm_bias"] = dlog.sum(0)
    return loss, d_hidden, grads


def pair_partners(n_pairs: int) -> np.ndarray:
    """Partner index for the [a_0..a_{B-1}, b_0..b_{B-1}] layout."""
    return np.concatenate([np.arange(n_pairs, 2 * n_pairs), np.arange(n_pairs)])


def nt_xent_loss(z, partner, tau: float = 0.1):
    """NT-Xent over 2B vectors with in-batch negatives.

    ``partner[i]`` is the index paired with row i. Each anchor's denominator
    runs over every other row (partner included). Returns ``(loss, dz)``.
    """
    z = np.asarray(z, dtype=np.float64)
    partner = np.asarray(partner)
    n = z.shape[0]
    if np.any(partner[partner] != np.arange(n)) or np.any(partner == np.arange(n)):
        raise ValueError("pairing must be a fixed-point-free involution")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm projection vector")
    zn = z / norms
    S = zn @ zn.T / tau
    np.fill_diagonal(S, -np.inf)
    P = softmax(S, axis=1)
    rows = np.arange(n)
    logp = S[rows, partner] - (np.log(np.exp(S - S.max(1, keepdims=True)).sum(1))
                               + S.max(1))
    loss = float(-logp.mean())
    dS = P.copy()
    dS[rows, partner] -= 1.0
    dS /= n
    dzn = (dS + dS.T) @ zn / tau
    dz = (dzn - zn * (zn * dzn).sum(1, keepdims=True)) / norms
    return loss, dz


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak``, then linear decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


def clip_grads(grads, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def adam_update(params, grads, state: AdamState, lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------


def _add_into(dst, src, scale=1.0):
    for k, g in src.items():
        dst[k] = dst[k] + scale * g if k in dst else scale * g


def joint_loss_and_grads(params, cfg: EncoderConfig, masked: Batch, positions, targets,
                         partner, tau: float, lam: float, parts=("social", "mlm")):
    """L = L_social + lam * L_MLM on one forward pass over the masked batch.

    ``parts`` restricts which terms contribute to the returned gradient (the
    reported losses always include both).
    """
    out = encoder_forward(params, cfg, masked)
    z, pcache = project(params, out.cls, keep_cache=True)
    l_soc, dz = nt_xent_loss(z, partner, tau)
    l_mlm, dh_mlm, g_mlm = mlm_loss(out.hidden, positions, targets, params)
    d_hidden = np.zeros_like(out.hidden)
    d_cls = None
    head = {}
    if "mlm" in parts and lam:
        d_hidden += lam * dh_mlm
        _add_into(head, g_mlm, lam)
    if "social" in parts:
        d_cls, g_proj = project_backward(params, pcache, dz)
        _add_into(head, g_proj)
    grads = encoder_backward(params, cfg, out.cache, d_hidden, d_cls)
    _add_into(grads, head)
    metrics = {"loss_social": l_soc, "loss_mlm": l_mlm, "loss_total": l_soc + lam * l_mlm}
    return metrics, grads


def mlm_loss_and_grads(params, cfg: EncoderConfig, masked: Batch, positions, targets):
    out = encoder_forward(params, cfg, masked)
    loss, dh, head = mlm_loss(out.hidden, positions, targets, params)
    grads = encoder_backward(params, cfg, out.cache, dh)
    _add_into(grads, head)
    return {"loss_total": loss, "loss_social": 0.0, "loss_mlm": loss}, grads


def _apply(params, grads, opt: AdamState, jcfg: JointLossConfig, total_steps: int) -> float:
    clip_grads(grads, jcfg.clip_norm)
    lr = lr_at(opt.step, jcfg.lr, jcfg.warmup, total_steps)
    adam_update(params, grads, opt, lr)
    return lr


def joint_step(params, cfg: EncoderConfig, pair_batch, policy: MaskPolicy,
               ccfg: ContrastiveConfig, jcfg: JointLossConfig, opt: AdamState, rng,
               total_steps: int) -> dict:
    """One optimiser update on a batch of token-sequence pairs ``[(a, b), ...]``."""
    B = len(pair_batch)
    seqs = [a for a, _ in pair_batch] + [b for _, b in pair_batch]
    masked, pos, tgt = mask_batch(collate(seqs), policy, rng, cfg.vocab_size)
    metrics, grads = joint_loss_and_grads(params, cfg, masked, pos, tgt, pair_partners(B),
                                          ccfg.temperature, jcfg.lam)
    _apply(params, grads, opt, jcfg, total_steps)
    return metrics


def mlm_step(params, cfg: EncoderConfig, seqs, policy: MaskPolicy, jcfg: JointLossConfig,
             opt: AdamState, rng, total_steps: int) -> dict:
    masked, pos, tgt = mask_batch(collate(seqs), policy, rng, cfg.vocab_size)
    metrics, grads = mlm_loss_and_grads(params, cfg, masked, pos, tgt)
    _apply(params, grads, opt, jcfg, total_steps)
    return metrics


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 64  # sequences per stage-1 step; stage 2 uses batch_pairs pairs
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float = 1.0
    lam: float = 0.05
    temperature: float = 0.1
    batch_pairs: int = 32
    mask_prob: float = 0.15
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d)

    def joint(self, stage: int) -> JointLossConfig:
        return JointLossConfig(self.lam, self.lr, self.warmup, self.clip_norm, stage)

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.batch_pairs)


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # dicts with step and the three losses

    def save_curve(self, path) -> None:
        save_curve(self.curve, path)


def save_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_social", "loss_mlm"])
        for row in curve:
            w.writerow([row["step"], f"{row['loss_total']:.6f}", f"{row['loss_social']:.6f}",
                        f"{row['loss_mlm']:.6f}"])


def encode_corpus(tokenizer: Tokenizer, texts) -> list:
    return [tokenizer.tokenize(t) for t in texts]


def pretrain_stage1(texts, tokenizer: Tokenizer, cfg: EncoderConfig, pcfg: PretrainConfig,
                    params=None) -> TrainResult:
    """MLM-only training; ``params`` continues from an existing model."""
    if len(texts) == 0:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(pcfg.seed)
    params = init_params(cfg, pcfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    seqs = encode_corpus(tokenizer, texts)
    policy = MaskPolicy(pcfg.mask_prob)
    jcfg = pcfg.joint(1)
    opt = AdamState()
    curve = []
    for step in range(pcfg.steps):
        pick = rng.integers(0, len(seqs), pcfg.batch_size)
        m = mlm_step(params, cfg, [seqs[i] for i in pick], policy, jcfg, opt, rng, pcfg.steps)
        curve.append({"step": step, **m})
        if step % 200 == 0:
            log.info("stage1 step %d mlm %.4f", step, m["loss_mlm"])
    return TrainResult(params, curve)


def pretrain_stage2(params, texts, pairs, tokenizer: Tokenizer, cfg: EncoderConfig,
                    pcfg: PretrainConfig) -> TrainResult:
    """Joint contrastive + MLM training from a stage-1 model.

    ``pairs`` is a sequence of (i, j) corpus indices (e.g. a SimilarPairSet).
    """
    pair_arr = np.array([(int(a), int(b)) for a, b, *_ in pairs], dtype=np.int64).reshape(-1, 2)
    if pair_arr.shape[0] == 0:
        raise ValueError("stage 2 needs at least one mined pair")
    if pair_arr.min() < 0 or pair_arr.max() >= len(texts):
        raise KeyError("mined pair references a tweet missing from the corpus")
    rng = np.random.default_rng(pcfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    seqs = encode_corpus(tokenizer, texts)
    policy = MaskPolicy(pcfg.mask_prob)
    ccfg = pcfg.contrastive()
    jcfg = pcfg.joint(2)
    opt = AdamState()
    curve = []
    B = min(ccfg.batch_pairs, pair_arr.shape[0])
    for step in range(pcfg.steps):
        pick = rng.choice(pair_arr.shape[0], B, replace=False)
        batch = [(seqs[a], seqs[b]) for a, b in pair_arr[pick]]
        m = joint_step(params, cfg, batch, policy, ccfg, jcfg, opt, rng, pcfg.steps)
        curve.append({"step": step, **m})
        if step % 200 == 0:
            log.info("stage2 step %d social %.4f mlm %.4f", step, m["loss_social"], m["loss_mlm"])
    return TrainResult(params, curve)
