"""Tiny transformer encoder with exact analytic gradients, in numpy.

Architecture: token + learned absolute position embeddings with layer
norm, a linear embedding->hidden projection with layer norm, then
post-LN residual blocks (multi-head self-attention + GELU feed-forward)
and an untied MLM head. The masking policy always substitutes the mask
token at selected positions (no random-word or same-word replacement).

Everything runs in float64 and the backward pass is written by hand, so
gradients can be validated against finite differences to tight
tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .config import ModelConfig
from . import costmodel

IGNORE_LABEL = -100
CHECKPOINT_VERSION = 1
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_NEG_INF = -1e30


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """All trainable tensors, keyed by a flat dotted name."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    tokens_seen: int = 0

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config,
                           tensors={k: v.copy() for k, v in self.tensors.items()},
                           step=self.step, tokens_seen=self.tokens_seen)

    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "step": self.step,
                "tokens_seen": self.tokens_seen,
                "config": self.config.to_dict()}
        with open(path, "wb") as f:  # keep the exact filename (no .npz suffix)
            np.savez(f, __meta__=np.frombuffer(
                json.dumps(meta).encode("utf-8"), dtype=np.uint8), **self.tensors)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            tensors = {k: z[k] for k in z.files if k != "__meta__"}
        return cls(config=ModelConfig.from_dict(meta["config"]), tensors=tensors,
                   step=meta["step"], tokens_seen=meta["tokens_seen"])


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std, by rejection resampling."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialization: truncated-normal weights (sigma =
    0.02), zero biases, unit layer-norm gains, untied MLM decoder."""
    rng = np.random.default_rng(seed)
    e, h, i = config.embedding_size, config.hidden_size, config.intermediate_size
    v, p = config.vocab_size, config.num_positions
    t: dict[str, np.ndarray] = {}

    def w(name, shape):
        t[name] = _trunc_normal(rng, shape)

    def b(name, n):
        t[name] = np.zeros(n)

    def ln(name, n):
        t[name + ".g"] = np.ones(n)
        t[name + ".b"] = np.zeros(n)

    w("tok_emb", (v, e))
    w("pos_emb", (p, e))
    ln("ln_emb", e)
    w("proj.w", (e, h)); b("proj.b", h)
    ln("ln_proj", h)
    for l in range(config.num_layers):
        pre = f"layer{l}."
        for m in ("wq", "wk", "wv", "wo"):
            w(pre + "attn." + m, (h, h))
        for m in ("bq", "bk", "bv", "bo"):
            b(pre + "attn." + m, h)
        ln(pre + "ln1", h)
        w(pre + "ffn.w1", (h, i)); b(pre + "ffn.b1", i)
        w(pre + "ffn.w2", (i, h)); b(pre + "ffn.b2", h)
        ln(pre + "ln2", h)
    w("head.w", (h, h)); b("head.b", h)
    ln("ln_head", h)
    w("dec.w", (h, v)); b("dec.b", v)

    params = ModelParams(config=config, tensors=t)
    expected = costmodel.count_params(config)
    assert params.param_count() == expected, \
        f"parameter layout mismatch: {params.param_count()} != {expected}"
    return params


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskedBatch:
    """MLM inputs: masked ids, labels at masked positions, padding mask."""

    input_ids: np.ndarray       # (B, S) int
    labels: np.ndarray          # (B, S) int, IGNORE_LABEL where unmasked
    attention_mask: np.ndarray  # (B, S) 1.0 = real token, 0.0 = pad


def apply_masking(tokens: np.ndarray, mask_id: int,
                  rng: np.random.Generator, rate: float = 0.15,
                  special_ids: frozenset[int] = frozenset(),
                  attention_mask: Optional[np.ndarray] = None) -> MaskedBatch:
    """Mask ceil(rate * n) maskable positions per sequence, all with the
    mask token. ``tokens`` is (B, S) or (S,)."""
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    tokens = np.atleast_2d(np.asarray(tokens))
    bsz, slen = tokens.shape
    if attention_mask is None:
        attention_mask = np.ones((bsz, slen))
    input_ids = tokens.copy()
    labels = np.full_like(tokens, IGNORE_LABEL)
    for r in range(bsz):
        maskable = [j for j in range(slen)
                    if attention_mask[r, j] > 0 and tokens[r, j] not in special_ids]
        if not maskable:
            continue
        k = int(np.ceil(rate * len(maskable)))
        chosen = rng.choice(len(maskable), size=k, replace=False)
        for c in chosen:
            j = maskable[c]
            labels[r, j] = tokens[r, j]
            input_ids[r, j] = mask_id
    return MaskedBatch(input_ids=input_ids, labels=labels,
                       attention_mask=attention_mask)


# ---------------------------------------------------------------------------
# primitives


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def _ln_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout(x, rate, rng):
    if rng is None or rate <= 0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


# ---------------------------------------------------------------------------
# encoder forward / backward


def _encoder_forward(params: ModelParams, input_ids: np.ndarray,
                     attention_mask: np.ndarray, train_mode: bool,
                     rng: Optional[np.random.Generator]):
    """Runs the stack up to the final hidden states; returns (h, cache)."""
    cfg = params.config
    t = params.tensors
    drop = cfg.dropout if train_mode else 0.0
    drng = rng if train_mode else None
    bsz, slen = input_ids.shape
    a, k = cfg.num_heads, cfg.key_size

    emb = t["tok_emb"][input_ids] + t["pos_emb"][:slen]
    x0, ln_emb_c = _ln_forward(emb, t["ln_emb.g"], t["ln_emb.b"])
    x0d, emb_keep = _dropout(x0, drop, drng)
    xp = x0d @ t["proj.w"] + t["proj.b"]
    h, ln_proj_c = _ln_forward(xp, t["ln_proj.g"], t["ln_proj.b"])

    key_bias = (1.0 - attention_mask)[:, None, None, :] * _NEG_INF
    layer_caches = []
    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        h_in = h
        q = h @ t[pre + "attn.wq"] + t[pre + "attn.bq"]
        kk = h @ t[pre + "attn.wk"] + t[pre + "attn.bk"]
        v = h @ t[pre + "attn.wv"] + t[pre + "attn.bv"]
        qh = q.reshape(bsz, slen, a, k).transpose(0, 2, 1, 3)
        kh = kk.reshape(bsz, slen, a, k).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, slen, a, k).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(k) + key_bias
        p = _softmax(scores)
        pd, p_keep = _dropout(p, drop, drng)
        ctx = (pd @ vh).transpose(0, 2, 1, 3).reshape(bsz, slen, a * k)
        att = ctx @ t[pre + "attn.wo"] + t[pre + "attn.bo"]
        attd, att_keep = _dropout(att, drop, drng)
        h1, ln1_c = _ln_forward(h_in + attd, t[pre + "ln1.g"], t[pre + "ln1.b"])

        f1 = h1 @ t[pre + "ffn.w1"] + t[pre + "ffn.b1"]
        u = gelu(f1)
        f2 = u @ t[pre + "ffn.w2"] + t[pre + "ffn.b2"]
        f2d, ffn_keep = _dropout(f2, drop, drng)
        h, ln2_c = _ln_forward(h1 + f2d, t[pre + "ln2.g"], t[pre + "ln2.b"])
        layer_caches.append(dict(h_in=h_in, qh=qh, kh=kh, vh=vh, p=p, pd=pd,
                                 ctx=ctx, p_keep=p_keep, att_keep=att_keep,
                                 h1=h1, ln1_c=ln1_c, f1=f1, u=u,
                                 ffn_keep=ffn_keep, ln2_c=ln2_c))
    cache = dict(input_ids=input_ids, x0d=x0d, emb_keep=emb_keep,
                 ln_emb_c=ln_emb_c, ln_proj_c=ln_proj_c,
                 layers=layer_caches, bsz=bsz, slen=slen)
    return h, cache


def _encoder_backward(params: ModelParams, dh: np.ndarray, cache,
                      grads: dict[str, np.ndarray]) -> None:
    """Accumulates gradients for the encoder stack into ``grads``."""
    cfg = params.config
    t = params.tensors
    bsz, slen = cache["bsz"], cache["slen"]
    a, k = cfg.num_heads, cfg.key_size

    for l in reversed(range(cfg.num_layers)):
        pre = f"layer{l}."
        c = cache["layers"][l]
        dsum2, dg2, db2 = _ln_backward(dh, c["ln2_c"])
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2
        dh1 = dsum2.copy()
        df2 = dsum2 if c["ffn_keep"] is None else dsum2 * c["ffn_keep"]
        grads[pre + "ffn.w2"] += c["u"].reshape(-1, c["u"].shape[-1]).T @ \
            df2.reshape(-1, df2.shape[-1])
        grads[pre + "ffn.b2"] += df2.sum(axis=(0, 1))
        du = df2 @ t[pre + "ffn.w2"].T
        df1 = du * gelu_grad(c["f1"])
        grads[pre + "ffn.w1"] += c["h1"].reshape(-1, c["h1"].shape[-1]).T @ \
            df1.reshape(-1, df1.shape[-1])
        grads[pre + "ffn.b1"] += df1.sum(axis=(0, 1))
        dh1 += df1 @ t[pre + "ffn.w1"].T

        dsum1, dg1, db1 = _ln_backward(dh1, c["ln1_c"])
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1
        dh_in = dsum1.copy()
        datt = dsum1 if c["att_keep"] is None else dsum1 * c["att_keep"]
        grads[pre + "attn.wo"] += c["ctx"].reshape(-1, a * k).T @ \
            datt.reshape(-1, datt.shape[-1])
        grads[pre + "attn.bo"] += datt.sum(axis=(0, 1))
        dctx = (datt @ t[pre + "attn.wo"].T).reshape(bsz, slen, a, k) \
            .transpose(0, 2, 1, 3)
        dpd = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["pd"].transpose(0, 1, 3, 2) @ dctx
        dp = dpd if c["p_keep"] is None else dpd * c["p_keep"]
        dscores = c["p"] * (dp - (dp * c["p"]).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(k)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, slen, a * k)
        dk_ = dkh.transpose(0, 2, 1, 3).reshape(bsz, slen, a * k)
        dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, slen, a * k)
        h_in_flat = c["h_in"].reshape(-1, c["h_in"].shape[-1])
        for name, d in (("wq", dq), ("wk", dk_), ("wv", dv)):
            grads[pre + "attn." + name] += h_in_flat.T @ d.reshape(-1, d.shape[-1])
        grads[pre + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[pre + "attn.bk"] += dk_.sum(axis=(0, 1))
        grads[pre + "attn.bv"] += dv.sum(axis=(0, 1))
        dh_in += dq @ t[pre + "attn.wq"].T
        dh_in += dk_ @ t[pre + "attn.wk"].T
        dh_in += dv @ t[pre + "attn.wv"].T
        dh = dh_in

    dxp, dgp, dbp = _ln_backward(dh, cache["ln_proj_c"])
    grads["ln_proj.g"] += dgp
    grads["ln_proj.b"] += dbp
    x0d = cache["x0d"]
    grads["proj.w"] += x0d.reshape(-1, x0d.shape[-1]).T @ \
        dxp.reshape(-1, dxp.shape[-1])
    grads["proj.b"] += dxp.sum(axis=(0, 1))
    dx0 = dxp @ t["proj.w"].T
    if cache["emb_keep"] is not None:
        dx0 = dx0 * cache["emb_keep"]
    demb, dge, dbe = _ln_backward(dx0, cache["ln_emb_c"])
    grads["ln_emb.g"] += dge
    grads["ln_emb.b"] += dbe
    np.add.at(grads["tok_emb"], cache["input_ids"], demb)
    grads["pos_emb"][:slen] += demb.sum(axis=0)


# ---------------------------------------------------------------------------
# MLM head


def _mlm_head_at(params: ModelParams, h_rows: np.ndarray):
    """MLM head on a (N, H) row matrix; returns (logits, cache)."""
    t = params.tensors
    th = h_rows @ t["head.w"] + t["head.b"]
    tg = gelu(th)
    tn, ln_c = _ln_forward(tg, t["ln_head.g"], t["ln_head.b"])
    logits = tn @ t["dec.w"] + t["dec.b"]
    return logits, (h_rows, th, tg, tn, ln_c)


def _mlm_head_backward(params: ModelParams, dlogits: np.ndarray, cache,
                       grads: dict[str, np.ndarray]) -> np.ndarray:
    t = params.tensors
    h_rows, th, tg, tn, ln_c = cache
    grads["dec.w"] += tn.T @ dlogits
    grads["dec.b"] += dlogits.sum(axis=0)
    dtn = dlogits @ t["dec.w"].T
    dtg, dg, db = _ln_backward(dtn, ln_c)
    grads["ln_head.g"] += dg
    grads["ln_head.b"] += db
    dth = dtg * gelu_grad(th)
    grads["head.w"] += h_rows.T @ dth
    grads["head.b"] += dth.sum(axis=0)
    return dth @ t["head.w"].T


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean CE over rows; returns (loss, dlogits, probs)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    loss = float((logz - shifted[np.arange(n), targets]).mean())
    probs = np.exp(shifted - logz[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits, probs


def forward_mlm(params: ModelParams, batch: MaskedBatch,
                train_mode: bool = False,
                rng: Optional[np.random.Generator] = None):
    """Full forward pass; returns (logits (B, S, V), loss)."""
    labeled = batch.labels != IGNORE_LABEL
    if not labeled.any():
        raise ValueError("batch has no labeled positions; MLM loss undefined")
    h, _ = _encoder_forward(params, batch.input_ids, batch.attention_mask,
                            train_mode, rng)
    bsz, slen, hd = h.shape
    logits_flat, _ = _mlm_head_at(params, h.reshape(-1, hd))
    logits = logits_flat.reshape(bsz, slen, -1)
    rows = logits.reshape(-1, logits.shape[-1])[labeled.reshape(-1)]
    targets = batch.labels[labeled]
    loss, _, _ = _cross_entropy(rows, targets)
    return logits, loss


def mlm_loss_and_grads(params: ModelParams, batch: MaskedBatch,
                       train_mode: bool = False,
                       rng: Optional[np.random.Generator] = None):
    """Loss and exact gradients for every tensor.

    The decoder is evaluated only at labeled positions, which is
    mathematically identical to the full-logits loss but much cheaper
    when few positions are masked.
    """
    labeled = batch.labels != IGNORE_LABEL
    if not labeled.any():
        raise ValueError("batch has no labeled positions; MLM loss undefined")
    h, cache = _encoder_forward(params, batch.input_ids, batch.attention_mask,
                                train_mode, rng)
    bsz, slen, hd = h.shape
    flat_idx = np.flatnonzero(labeled.reshape(-1))
    h_rows = h.reshape(-1, hd)[flat_idx]
    logits, head_cache = _mlm_head_at(params, h_rows)
    loss, dlogits, _ = _cross_entropy(logits, batch.labels[labeled])

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    dh_rows = _mlm_head_backward(params, dlogits, head_cache, grads)
    dh = np.zeros((bsz * slen, hd))
    dh[flat_idx] = dh_rows
    _encoder_backward(params, dh.reshape(bsz, slen, hd), cache, grads)
    return loss, grads


def perplexity(loss: float) -> float:
    if not np.isfinite(loss):
        raise ValueError("loss must be finite")
    return float(np.exp(loss))


# ---------------------------------------------------------------------------
# classification head (fine-tuning)


def init_classifier_head(config: ModelConfig, num_classes: int,
                         seed: int = 0) -> dict[str, np.ndarray]:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    return {"cls.w": _trunc_normal(rng, (config.hidden_size, num_classes)),
            "cls.b": np.zeros(num_classes)}


def forward_classifier(params: ModelParams, head: dict[str, np.ndarray],
                       input_ids: np.ndarray, labels: np.ndarray,
                       attention_mask: Optional[np.ndarray] = None,
                       train_mode: bool = False,
                       rng: Optional[np.random.Generator] = None):
    """First-position pooled classification; returns (logits, loss)."""
    logits, loss, _, _ = _classifier_pass(
        params, head, input_ids, labels, attention_mask, train_mode, rng,
        need_grads=False)
    return logits, loss


def classifier_loss_and_grads(params: ModelParams, head: dict[str, np.ndarray],
                              input_ids: np.ndarray, labels: np.ndarray,
                              attention_mask: Optional[np.ndarray] = None,
                              train_mode: bool = False,
                              rng: Optional[np.random.Generator] = None):
    """Returns (logits, loss, encoder grads, head grads)."""
    return _classifier_pass(params, head, input_ids, labels, attention_mask,
                            train_mode, rng, need_grads=True)


def _classifier_pass(params, head, input_ids, labels, attention_mask,
                     train_mode, rng, need_grads):
    input_ids = np.atleast_2d(np.asarray(input_ids))
    labels = np.asarray(labels)
    num_classes = head["cls.w"].shape[1]
    if (labels >= num_classes).any() or (labels < 0).any():
        raise ValueError("label outside [0, num_classes)")
    if attention_mask is None:
        attention_mask = np.ones(input_ids.shape)
    h, cache = _encoder_forward(params, input_ids, attention_mask,
                                train_mode, rng)
    pooled = h[:, 0, :]
    logits = pooled @ head["cls.w"] + head["cls.b"]
    loss, dlogits, _ = _cross_entropy(logits, labels)
    if not need_grads:
        return logits, loss, None, None
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    head_grads = {"cls.w": pooled.T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    dh = np.zeros_like(h)
    dh[:, 0, :] = dlogits @ head["cls.w"].T
    _encoder_backward(params, dh, cache, grads)
    return logits, loss, grads, head_grads
