import numpy as np
import pytest

from soclm.encoder import (CLS_ID, MASK_ID, PAD_ID, SEP_ID, EncoderConfig, Tokenizer, collate,
                           encoder_forward, init_params, project)
from soclm.graph import WorldConfig, generate_synthetic_world
from soclm.pretrain import (AdamState, ContrastiveConfig, JointLossConfig, MaskPolicy,
                            PretrainConfig, adam_update, clip_grads, joint_loss_and_grads, lr_at,
                            mask_batch, mask_tokens, mlm_loss, nt_xent_loss, pair_partners,
                            pretrain_stage1, pretrain_stage2, save_curve, softmax_cross_entropy)

from .gradcheck import numeric_grad, rel_error


def brute_nt_xent(z, partner, tau):
    zn = [v / np.linalg.norm(v) for v in z]
    total = 0.0
    for i in range(len(z)):
        num = np.exp(zn[i] @ zn[partner[i]] / tau)
        den = sum(np.exp(zn[i] @ zn[j] / tau) for j in range(len(z)) if j != i)
        total += -np.log(num / den)
    return total / len(z)


# ---------------------------------------------------------------------------
# masking


def _batch():
    return collate([np.array([CLS_ID, 7, 8, 9, SEP_ID]), np.array([CLS_ID, 10, SEP_ID])])


def test_mask_prob_zero_is_identity(rng):
    b = _batch()
    masked, pos, tgt = mask_batch(b, MaskPolicy(0.0), rng, 20)
    np.testing.assert_array_equal(masked.ids, b.ids)
    assert len(pos) == len(tgt) == 0


def test_mask_prob_one_selects_every_ordinary_token(rng):
    b = _batch()
    _, pos, tgt = mask_batch(b, MaskPolicy(1.0), rng, 20)
    assert sorted(map(tuple, pos.tolist())) == [(0, 1), (0, 2), (0, 3), (1, 1)]
    assert tgt.tolist() == [7, 8, 9, 10]


def test_specials_and_padding_never_touched(rng):
    b = _batch()
    for _ in range(50):
        masked, _, _ = mask_batch(b, MaskPolicy(1.0), rng, 20)
        keep = b.special | ~b.mask
        np.testing.assert_array_equal(masked.ids[keep], b.ids[keep])
        assert np.all(masked.ids[1, 3:] == PAD_ID)


def test_mask_rate_and_action_split():
    r = np.random.default_rng(0)
    n = 100_000
    b = collate([np.concatenate([[CLS_ID], np.full(1000, 9), [SEP_ID]])] * (n // 1000))
    masked, pos, _ = mask_batch(b, MaskPolicy(0.15), r, 50)
    rate = len(pos) / n
    assert 0.145 <= rate <= 0.155
    new = masked.ids[pos[:, 0], pos[:, 1]]
    frac_mask = np.mean(new == MASK_ID)
    frac_keep = np.mean(new == 9)
    assert abs(frac_mask - 0.8) < 0.01
    # random replacements can land on the original id (1 in 45)
    assert abs(frac_keep - (0.1 + 0.1 / 45)) < 0.01


def test_mask_tokens_single_sequence(rng):
    tok = Tokenizer(["a", "b", "c"])
    ids, targets = mask_tokens(tok.tokenize("a b c"), MaskPolicy(1.0, (1.0, 0.0, 0.0)), rng, 8)
    assert ids.tolist() == [CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]
    assert targets == {1: 5, 2: 6, 3: 7}


def test_mask_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(1.5)
    with pytest.raises(ValueError):
        MaskPolicy(0.15, (0.5, 0.1, 0.1))


# ---------------------------------------------------------------------------
# losses


def test_mlm_uniform_logits_is_log_v(rng):
    V = 200
    params = {"tok_emb": np.zeros((V, 4)), "mlm_bias": np.zeros(V)}
    hidden = rng.normal(size=(2, 6, 4))
    pos = np.array([[0, 1], [0, 4], [1, 2]])
    loss, _, _ = mlm_loss(hidden, pos, np.array([3, 17, 199]), params)
    assert abs(loss - np.log(V)) < 1e-6


def test_cross_entropy_margin_and_shift(rng):
    logits = np.zeros((1, 10))
    logits[0, 4] = 30.0
    assert softmax_cross_entropy(logits, [4])[0] < 1e-11
    x = rng.normal(size=(5, 7))
    t = rng.integers(0, 7, 5)
    a, da = softmax_cross_entropy(x, t)
    b, db = softmax_cross_entropy(x + 123.0, t)
    assert abs(a - b) < 1e-9
    np.testing.assert_allclose(da, db, atol=1e-12)
    f = lambda: softmax_cross_entropy(x, t)[0]  # noqa: E731
    assert rel_error(da, numeric_grad(f, x)) < 1e-6


def test_mlm_grads(rng):
    params = {"tok_emb": rng.normal(size=(12, 4)), "mlm_bias": rng.normal(size=12)}
    hidden = rng.normal(size=(2, 5, 4))
    pos = np.array([[0, 1], [1, 3], [1, 4]])
    tgt = np.array([2, 11, 5])
    _, dh, g = mlm_loss(hidden, pos, tgt, params)
    f = lambda: mlm_loss(hidden, pos, tgt, params)[0]  # noqa: E731
    assert rel_error(dh, numeric_grad(f, hidden)) < 1e-6
    for k in ("tok_emb", "mlm_bias"):
        assert rel_error(g[k], numeric_grad(f, params[k])) < 1e-6


def test_nt_xent_single_pair_is_zero(rng):
    loss, dz = nt_xent_loss(rng.normal(size=(2, 5)), pair_partners(1), 0.1)
    assert abs(loss) < 1e-9 and np.allclose(dz, 0.0)


def test_nt_xent_identical_vectors_is_log_seven(rng):
    z = np.tile(rng.normal(size=5), (8, 1))
    loss, _ = nt_xent_loss(z, pair_partners(4), 0.1)
    assert abs(loss - np.log(7)) < 1e-6


def test_nt_xent_matches_brute_force(rng):
    z = rng.normal(size=(6, 4))
    p = pair_partners(3)
    for tau in (0.1, 0.5, 1.0):
        assert abs(nt_xent_loss(z, p, tau)[0] - brute_nt_xent(z, p, tau)) < 1e-10


def test_nt_xent_gradient(rng):
    z = rng.normal(size=(8, 5))
    p = pair_partners(4)
    _, dz = nt_xent_loss(z, p, 0.1)
    f = lambda: nt_xent_loss(z, p, 0.1)[0]  # noqa: E731
    assert rel_error(dz, numeric_grad(f, z)) < 1e-6


def test_nt_xent_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        nt_xent_loss(np.zeros((2, 3)), pair_partners(1))
    with pytest.raises(ValueError):
        nt_xent_loss(rng.normal(size=(4, 3)), np.array([1, 2, 3, 0]))


def test_aligned_pairs_beat_random(rng):
    a = rng.normal(size=(4, 6))
    aligned = np.vstack([a, a + 0.01 * rng.normal(size=a.shape)])
    shuffled = np.vstack([a, rng.normal(size=a.shape)])
    p = pair_partners(4)
    assert nt_xent_loss(aligned, p)[0] < nt_xent_loss(shuffled, p)[0]


# ---------------------------------------------------------------------------
# joint objective


@pytest.fixture
def joint_inputs(tiny_cfg):
    r = np.random.default_rng(2)
    seqs = [np.concatenate([[CLS_ID], r.integers(5, 20, n), [SEP_ID]]) for n in (3, 5, 4, 6)]
    b = collate(seqs)
    masked, pos, tgt = mask_batch(b, MaskPolicy(0.4), r, tiny_cfg.vocab_size)
    assert len(tgt) > 0
    return masked, pos, tgt, pair_partners(2)


def test_joint_total_is_social_plus_weighted_mlm(tiny_cfg, tiny_params, joint_inputs):
    masked, pos, tgt, partner = joint_inputs
    m, g = joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1, 0.05)
    out = encoder_forward(tiny_params, tiny_cfg, masked, keep_cache=False)
    soc = nt_xent_loss(project(tiny_params, out.cls), partner, 0.1)[0]
    mlm = mlm_loss(out.hidden, pos, tgt, tiny_params)[0]
    assert abs(m["loss_social"] - soc) < 1e-12 and abs(m["loss_mlm"] - mlm) < 1e-12
    assert abs(m["loss_total"] - (soc + 0.05 * mlm)) < 1e-12
    _, gs = joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1, 0.05,
                                 parts=("social",))
    _, gm = joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1, 0.05,
                                 parts=("mlm",))
    for k in g:
        np.testing.assert_allclose(g[k], gs[k] + gm[k], atol=1e-12)


def test_lambda_zero_is_pure_social(tiny_cfg, tiny_params, joint_inputs):
    masked, pos, tgt, partner = joint_inputs
    m, g = joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1, 0.0)
    assert m["loss_total"] == m["loss_social"]
    assert not np.any(g["mlm_bias"])


def test_joint_gradient(tiny_cfg, tiny_params, joint_inputs):
    masked, pos, tgt, partner = joint_inputs
    _, g = joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1, 0.5)

    def f():
        return joint_loss_and_grads(tiny_params, tiny_cfg, masked, pos, tgt, partner, 0.1,
                                    0.5)[0]["loss_total"]

    worst = max(rel_error(g[k], numeric_grad(f, tiny_params[k], 1e-5))
                for k in ("tok_emb", "layer0.wq", "layer1.w1", "layer1.ln2_g", "proj_w1",
                          "proj_b2", "mlm_bias", "pos_emb"))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# optimiser


def test_lr_schedule():
    assert lr_at(0, 1e-3, 10, 100) == pytest.approx(1e-4)
    assert lr_at(9, 1e-3, 10, 100) == pytest.approx(1e-3)
    assert lr_at(99, 1e-3, 10, 100) < lr_at(50, 1e-3, 10, 100) < 1e-3


def test_clip_grads():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grads(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8])
    h = {"a": np.array([0.3, 0.4])}
    clip_grads(h, 1.0)
    np.testing.assert_allclose(h["a"], [0.3, 0.4])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    adam_update(p, {"w": np.array([0.5, -3.0])}, AdamState(), 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_default_hyperparameters():
    c = PretrainConfig()
    assert (c.lam, c.temperature) == (0.05, 0.1)
    assert JointLossConfig().lam == 0.05 and ContrastiveConfig().temperature == 0.1
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)


# ---------------------------------------------------------------------------
# training loops


@pytest.fixture(scope="module")
def sharp_world():
    # most tokens come from the community sub-slice, so context predicts them well
    return generate_synthetic_world(WorldConfig(n_topics=4, n_tweets=400, topic_token_rate=0.9,
                                                community_token_rate=0.8), seed=0)


@pytest.fixture(scope="module")
def small_setup(sharp_world):
    tok = Tokenizer.build(sharp_world.corpus.texts, max_len=16)
    cfg = EncoderConfig(vocab_size=len(tok), d_model=32, n_layers=2, n_heads=2, d_ff=64,
                        max_len=16, proj_dims=(32, 32))
    return tok, cfg


def test_stage1_drops_below_uniform_baseline(sharp_world, small_setup):
    tok, cfg = small_setup
    pc = PretrainConfig(steps=600, batch_size=32, lr=3e-3, warmup=50)
    curve = [c["loss_mlm"] for c in pretrain_stage1(sharp_world.corpus.texts, tok, cfg, pc).curve]
    assert np.mean(curve[:20]) > np.mean(curve[-100:])
    assert np.mean(curve[-100:]) < 0.8 * np.log(cfg.vocab_size)


def test_stage1_zero_steps_and_determinism(sharp_world, small_setup):
    tok, cfg = small_setup
    texts = sharp_world.corpus.texts
    r0 = pretrain_stage1(texts, tok, cfg, PretrainConfig(steps=0))
    init = init_params(cfg, 0)
    assert r0.curve == [] and all(np.array_equal(r0.params[k], init[k]) for k in init)
    pc = PretrainConfig(steps=5, batch_size=8, seed=3)
    a, b = pretrain_stage1(texts, tok, cfg, pc), pretrain_stage1(texts, tok, cfg, pc)
    assert a.curve == b.curve
    with pytest.raises(ValueError):
        pretrain_stage1([], tok, cfg, pc)


def _mean_topic_cosine(params, cfg, tok, texts, topic):
    seqs = [tok.tokenize(t) for t in texts]
    z = project(params, encoder_forward(params, cfg, collate(seqs), keep_cache=False).cls)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    S = z @ z.T
    same = topic[:, None] == topic[None, :]
    off = ~np.eye(len(texts), dtype=bool)
    return S[same & off].mean() - S[~same].mean()


def test_stage2_pulls_same_topic_together(sharp_world, small_setup):
    tok, cfg = small_setup
    texts = sharp_world.corpus.texts
    topic = sharp_world.tweet_topic
    r = np.random.default_rng(0)
    # planted pairs: random same-topic tweets
    pairs = []
    for i in range(len(texts)):
        same = np.flatnonzero(topic == topic[i])
        pairs.append((i, int(r.choice(same[same != i]))))
    start = init_params(cfg, 0)
    res = pretrain_stage2(start, texts, pairs, tok, cfg,
                          PretrainConfig(steps=150, batch_pairs=16, lr=3e-3, warmup=20))
    sub = slice(0, 120)
    before = _mean_topic_cosine(start, cfg, tok, texts[sub], topic[sub])
    after = _mean_topic_cosine(res.params, cfg, tok, texts[sub], topic[sub])
    assert after > before + 0.1
    soc = [c["loss_social"] for c in res.curve]
    assert np.mean(soc[-20:]) < np.mean(soc[:20])


def test_stage2_input_errors(sharp_world, small_setup):
    tok, cfg = small_setup
    texts = sharp_world.corpus.texts[:10]
    p = init_params(cfg, 0)
    with pytest.raises(ValueError):
        pretrain_stage2(p, texts, [], tok, cfg, PretrainConfig(steps=1))
    with pytest.raises(KeyError):
        pretrain_stage2(p, texts, [(0, 10)], tok, cfg, PretrainConfig(steps=1))


def test_curve_csv(tmp_path):
    save_curve([{"step": 0, "loss_total": 1.5, "loss_social": 1.0, "loss_mlm": 10.0}],
               tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "step,loss_total,loss_social,loss_mlm", "0,1.500000,1.000000,10.000000"]
