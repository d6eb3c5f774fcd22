import math

import numpy as np
import pytest

from downscale_lab import costmodel, model as md
from downscale_lab.config import ModelConfig

MICRO = ModelConfig(embedding_size=8, hidden_size=8, intermediate_size=16,
                    num_layers=2, num_heads=2, vocab_size=40, max_seq_len=12,
                    num_positions=16)


def micro_batch(cfg=MICRO, bsz=2, seed=0, mask_id=4):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(5, cfg.vocab_size, size=(bsz, cfg.max_seq_len))
    return md.apply_masking(tokens, mask_id=mask_id, rng=rng,
                            special_ids=frozenset(range(5)))


# ---------------------------------------------------------------------------
# init / params

def test_param_count_matches_costmodel():
    for cfg in [MICRO,
                ModelConfig(embedding_size=16, hidden_size=32,
                            intermediate_size=64, num_layers=1, num_heads=4,
                            vocab_size=100)]:
        params = md.init_model(cfg, seed=0)
        assert params.param_count() == costmodel.count_params(cfg)


def test_init_deterministic():
    p1 = md.init_model(MICRO, seed=0)
    p2 = md.init_model(MICRO, seed=0)
    p3 = md.init_model(MICRO, seed=1)
    for k in p1.tensors:
        assert np.array_equal(p1.tensors[k], p2.tensors[k])
    assert any(not np.array_equal(p1.tensors[k], p3.tensors[k])
               for k in p1.tensors)


def test_init_structure():
    params = md.init_model(MICRO, seed=0)
    t = params.tensors
    assert np.all(t["ln_emb.g"] == 1.0) and np.all(t["ln_emb.b"] == 0.0)
    assert np.all(t["proj.b"] == 0.0)
    # truncated normal: weights bounded by 2 sigma
    assert np.abs(t["tok_emb"]).max() <= 2 * 0.02 + 1e-12
    assert t["dec.w"].shape == (MICRO.hidden_size, MICRO.vocab_size)
    # untied decoder
    assert t["dec.w"].base is None


# ---------------------------------------------------------------------------
# masking

def test_apply_masking_invariants():
    batch = micro_batch()
    masked = batch.labels != md.IGNORE_LABEL
    assert masked.any()
    assert np.all(batch.input_ids[masked] == 4)
    # labels only at masked positions and preserve the original tokens
    assert np.all(batch.labels[~masked] == md.IGNORE_LABEL)
    # exactly ceil(0.15 * maskable) per row
    for r in range(batch.input_ids.shape[0]):
        assert masked[r].sum() == math.ceil(0.15 * MICRO.max_seq_len)


def test_apply_masking_respects_specials_and_padding():
    tokens = np.array([[0, 2, 7, 8, 9, 3]])
    attn = np.array([[1.0, 1, 1, 1, 0, 1]])
    rng = np.random.default_rng(0)
    b = md.apply_masking(tokens, mask_id=4, rng=rng, rate=0.9,
                         special_ids=frozenset({0, 2, 3}),
                         attention_mask=attn)
    masked = b.labels != md.IGNORE_LABEL
    assert not masked[0, 0] and not masked[0, 1] and not masked[0, 5]
    assert not masked[0, 4]  # padded position


def test_apply_masking_rate_frequency():
    """Monte-Carlo: each maskable position is masked ~uniformly."""
    tokens = np.tile(np.arange(10, 30), (1, 1))
    rng = np.random.default_rng(7)
    hits = np.zeros(20)
    n = 600
    for _ in range(n):
        b = md.apply_masking(tokens, mask_id=4, rng=rng, rate=0.15)
        hits += (b.labels[0] != md.IGNORE_LABEL)
    k = math.ceil(0.15 * 20)
    assert np.all(hits / n > k / 20 - 0.07)
    assert np.all(hits / n < k / 20 + 0.07)


def test_apply_masking_bad_rate():
    with pytest.raises(ValueError):
        md.apply_masking(np.array([[5, 6]]), 4, np.random.default_rng(0),
                         rate=0.0)


# ---------------------------------------------------------------------------
# primitives

def test_gelu_values():
    assert md.gelu(np.array([0.0]))[0] == 0.0
    assert abs(md.gelu(np.array([1.0]))[0] - 0.8413447460685429) < 1e-12
    x = np.linspace(-3, 3, 50)
    fd = (md.gelu(x + 1e-6) - md.gelu(x - 1e-6)) / 2e-6
    assert np.abs(fd - md.gelu_grad(x)).max() < 1e-8


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    p = md._softmax(x)
    assert np.allclose(p.sum(axis=-1), 1.0)
    assert np.all(p >= 0)


def test_layernorm_backward_finite_difference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    y, cache = md._ln_forward(x, g, b)
    dy = rng.normal(size=y.shape)
    dx, dg, db = md._ln_backward(dy, cache)
    eps = 1e-6
    for idx in [(0, 0), (2, 3), (3, 5)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fp = (md._ln_forward(xp, g, b)[0] * dy).sum()
        fm = (md._ln_forward(xm, g, b)[0] * dy).sum()
        assert abs((fp - fm) / (2 * eps) - dx[idx]) < 1e-6


# ---------------------------------------------------------------------------
# forward

def test_initial_loss_near_log_vocab():
    params = md.init_model(MICRO, seed=0)
    batch = micro_batch(bsz=8)
    _, loss = md.forward_mlm(params, batch)
    assert 0.95 * math.log(MICRO.vocab_size) <= loss \
        <= 1.1 * math.log(MICRO.vocab_size)


def test_forward_and_training_losses_agree():
    params = md.init_model(MICRO, seed=3)
    batch = micro_batch(bsz=4, seed=2)
    _, loss_full = md.forward_mlm(params, batch)
    loss_rows, _ = md.mlm_loss_and_grads(params, batch)
    assert abs(loss_full - loss_rows) < 1e-12


def test_forward_deterministic_in_eval_mode():
    params = md.init_model(MICRO, seed=0)
    batch = micro_batch()
    l1, _ = md.forward_mlm(params, batch)
    l2, _ = md.forward_mlm(params, batch)
    assert np.array_equal(l1, l2)


def test_no_labels_errors():
    params = md.init_model(MICRO, seed=0)
    batch = micro_batch()
    batch.labels[:] = md.IGNORE_LABEL
    with pytest.raises(ValueError):
        md.forward_mlm(params, batch)


def test_position_permutation_equivariance():
    """With position embeddings zeroed, permuting the sequence permutes
    the hidden states (bidirectional attention has no order prior)."""
    params = md.init_model(MICRO, seed=0)
    params.tensors["pos_emb"][:] = 0.0
    ids = np.random.default_rng(0).integers(5, 40, size=(1, 12))
    attn = np.ones((1, 12))
    h1, _ = md._encoder_forward(params, ids, attn, False, None)
    perm = np.random.default_rng(1).permutation(12)
    h2, _ = md._encoder_forward(params, ids[:, perm], attn, False, None)
    assert np.allclose(h1[0, perm], h2[0], atol=1e-10)


# ---------------------------------------------------------------------------
# gradients

def _flat_loss(params, batch, name, flat_values):
    params.tensors[name].flat[:] = flat_values
    loss, _ = md.mlm_loss_and_grads(params, batch)
    return loss


def test_gradients_match_finite_differences():
    cfg = ModelConfig(embedding_size=6, hidden_size=6, intermediate_size=10,
                      num_layers=1, num_heads=2, vocab_size=30, max_seq_len=6,
                      num_positions=8)
    params = md.init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    tokens = rng.integers(5, 30, size=(2, 6))
    batch = md.apply_masking(tokens, 4, rng, rate=0.3)
    _, grads = md.mlm_loss_and_grads(params, batch)
    eps = 1e-5
    check_rng = np.random.default_rng(123)
    for name, tensor in params.tensors.items():
        idxs = check_rng.choice(tensor.size, size=min(4, tensor.size),
                                replace=False)
        for i in idxs:
            orig = tensor.flat[i]
            tensor.flat[i] = orig + eps
            lp, _ = md.mlm_loss_and_grads(params, batch)
            tensor.flat[i] = orig - eps
            lm, _ = md.mlm_loss_and_grads(params, batch)
            tensor.flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = grads[name].flat[i]
            # absolute floor covers near-zero gradients where central
            # differences are pure rounding noise
            if abs(fd - an) < 1e-9:
                continue
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-3, f"{name}[{i}]"


def test_classifier_gradients_match_finite_differences():
    cfg = ModelConfig(embedding_size=6, hidden_size=6, intermediate_size=10,
                      num_layers=1, num_heads=2, vocab_size=30, max_seq_len=6,
                      num_positions=8)
    params = md.init_model(cfg, seed=0)
    head = md.init_classifier_head(cfg, num_classes=3, seed=0)
    rng = np.random.default_rng(0)
    ids = rng.integers(5, 30, size=(3, 6))
    labels = np.array([0, 2, 1])
    _, _, grads, head_grads = md.classifier_loss_and_grads(
        params, head, ids, labels)
    eps = 1e-5
    for store, gstore, name in [(head, head_grads, "cls.w"),
                                (params.tensors, grads, "proj.w"),
                                (params.tensors, grads, "layer0.attn.wq")]:
        tensor = store[name]
        for i in np.random.default_rng(1).choice(tensor.size, 3, replace=False):
            orig = tensor.flat[i]
            tensor.flat[i] = orig + eps
            _, lp = md.forward_classifier(params, head, ids, labels)
            tensor.flat[i] = orig - eps
            _, lm = md.forward_classifier(params, head, ids, labels)
            tensor.flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = gstore[name].flat[i]
            if abs(fd - an) < 1e-9:
                continue
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3, name


# ---------------------------------------------------------------------------
# classification / misc

def test_classifier_chance_level_loss():
    params = md.init_model(MICRO, seed=0)
    head = md.init_classifier_head(MICRO, num_classes=4, seed=0)
    ids = np.random.default_rng(0).integers(5, 40, size=(8, 12))
    labels = np.random.default_rng(1).integers(0, 4, size=8)
    _, loss = md.forward_classifier(params, head, ids, labels)
    assert abs(loss - math.log(4)) < 0.1


def test_classifier_label_validation():
    params = md.init_model(MICRO, seed=0)
    head = md.init_classifier_head(MICRO, num_classes=2, seed=0)
    with pytest.raises(ValueError):
        md.forward_classifier(params, head, np.array([[5, 6]]), np.array([2]))
    with pytest.raises(ValueError):
        md.init_classifier_head(MICRO, num_classes=1)


def test_perplexity():
    assert md.perplexity(0.0) == 1.0
    assert abs(md.perplexity(math.log(7.0)) - 7.0) < 1e-12
    with pytest.raises(ValueError):
        md.perplexity(float("nan"))


def test_checkpoint_roundtrip(tmp_path):
    params = md.init_model(MICRO, seed=0)
    params.step = 42
    params.tokens_seen = 1234
    p = tmp_path / "m.ckpt"
    params.save(p)
    loaded = md.ModelParams.load(p)
    assert loaded.config == params.config
    assert loaded.step == 42 and loaded.tokens_seen == 1234
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k], params.tensors[k])
    batch = micro_batch()
    _, l1 = md.forward_mlm(params, batch)
    _, l2 = md.forward_mlm(loaded, batch)
    assert l1 == l2


def test_dropout_only_in_train_mode():
    params = md.init_model(MICRO, seed=0)
    batch = micro_batch(bsz=4)
    rng = np.random.default_rng(0)
    _, l_eval = md.forward_mlm(params, batch, train_mode=False)
    _, l_train = md.forward_mlm(params, batch, train_mode=True, rng=rng)
    assert l_eval != l_train
