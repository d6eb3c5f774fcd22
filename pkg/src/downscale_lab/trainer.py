"""Optimization loops: MLM pre-training and classifier fine-tuning.

AdamW with decoupled weight decay, inverse-square-root or linear
learning-rate schedules (both with 5% warmup), global-norm gradient
clipping, and deterministic seeding throughout. Pre-training produces a
RunLog whose cumulative FLOPs column follows the analytic cost model.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import costmodel, model as model_mod
from .config import ModelConfig
from .corpus import TextSpan
from .model import ModelParams, MaskedBatch, apply_masking
from .tokenizer import TokenizerModel

SCHEDULES = ("inverse_sqrt", "linear")


@dataclass(frozen=True)
class OptimizerHyper:
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "inverse_sqrt"
    warmup_fraction: float = 0.05
    total_steps: int = 35000
    batch_size: int = 256
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    @property
    def warmup_steps(self) -> int:
        return int(np.ceil(self.warmup_fraction * self.total_steps))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(hyper: OptimizerHyper, step: int) -> float:
    """Learning rate at a given update step.

    Both schedules ramp linearly from 0 to peak over the warmup steps W.
    inverse_sqrt then decays as peak * sqrt(W / step); linear decays to
    0 at total_steps.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    total = hyper.total_steps
    if step > total:
        warnings.warn(f"step {step} beyond total_steps {total}; clamping")
        step = total
    w = hyper.warmup_steps
    if step <= w:
        return hyper.peak_lr * step / w
    if hyper.schedule == "inverse_sqrt":
        return hyper.peak_lr * np.sqrt(w / step)
    return hyper.peak_lr * (total - step) / (total - w)


# ---------------------------------------------------------------------------
# AdamW


def no_decay(name: str) -> bool:
    """Layer norms, biases, and embedding tables skip weight decay."""
    last = name.rsplit(".", 1)[-1]
    if last in ("b", "g", "bq", "bk", "bv", "bo", "b1", "b2"):
        return True
    part = name.split(".")
    if any(p.startswith("ln") for p in part):
        return True
    return name in ("tok_emb", "pos_emb")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, tensors: dict[str, np.ndarray]) -> "AdamWState":
        return cls(m={k: np.zeros_like(t) for k, t in tensors.items()},
                   v={k: np.zeros_like(t) for k, t in tensors.items()})


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adamw_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, hyper: OptimizerHyper, lr: float) -> None:
    """One in-place AdamW update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient in {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay > 0 and not no_decay(name):
            p -= lr * hyper.weight_decay * p


# ---------------------------------------------------------------------------
# run logs


@dataclass
class RunLog:
    config: ModelConfig
    hyper: OptimizerHyper
    seed: int
    run_id: str = "run"
    records: list[tuple[int, int, float, float, float, float]] = field(
        default_factory=list)
    # record: (step, tokens_seen, flops, train_loss, eval_loss, eval_ppl)

    def add(self, step, tokens_seen, flops, train_loss, eval_loss, eval_ppl):
        if self.records and step <= self.records[-1][0]:
            raise ValueError("steps must be strictly increasing")
        self.records.append((step, tokens_seen, flops, train_loss,
                             eval_loss, eval_ppl))

    def save(self, csv_path) -> None:
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "tokens_seen", "flops", "train_loss",
                        "eval_loss", "eval_ppl"])
            for rec in self.records:
                w.writerow(rec)
        sidecar = csv_path.with_suffix(".json")
        with open(sidecar, "w") as f:
            json.dump({"config": self.config.to_dict(),
                       "hyper": self.hyper.to_dict(),
                       "seed": self.seed, "run_id": self.run_id}, f, indent=2)

    @classmethod
    def load(cls, csv_path) -> "RunLog":
        csv_path = Path(csv_path)
        with open(csv_path.with_suffix(".json")) as f:
            meta = json.load(f)
        log = cls(config=ModelConfig.from_dict(meta["config"]),
                  hyper=OptimizerHyper(**meta["hyper"]),
                  seed=meta["seed"], run_id=meta.get("run_id", csv_path.stem))
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                log.records.append((
                    int(row["step"]), int(row["tokens_seen"]),
                    float(row["flops"]), float(row["train_loss"]),
                    float(row["eval_loss"]), float(row["eval_ppl"])))
        return log


# ---------------------------------------------------------------------------
# data preparation


def spans_to_sequences(spans: Iterable[TextSpan | str], tok: TokenizerModel,
                       seq_len: int) -> np.ndarray:
    """Encode, then pad/truncate every span to exactly seq_len ids."""
    rows = []
    for span in spans:
        text = span.text if isinstance(span, TextSpan) else span
        ids = tok.encode(text)[:seq_len]
        if len(ids) < seq_len:
            ids = ids + [tok.pad_id] * (seq_len - len(ids))
        rows.append(ids)
    return np.asarray(rows, dtype=np.int64)


def _make_masked(tok: TokenizerModel, seqs: np.ndarray,
                 rng: np.random.Generator, rate: float = 0.15) -> MaskedBatch:
    special = frozenset(tok.specials.values())
    att = (seqs != tok.pad_id).astype(float)
    return apply_masking(seqs, tok.mask_id, rng, rate=rate,
                         special_ids=special, attention_mask=att)


def evaluate_mlm(params: ModelParams, batches: Sequence[MaskedBatch]) -> float:
    """Mean eval loss over pre-masked batches, weighted by label count."""
    if not batches:
        raise ValueError("empty evaluation set")
    total, n = 0.0, 0
    for b in batches:
        k = int((b.labels != model_mod.IGNORE_LABEL).sum())
        _, loss = model_mod.forward_mlm(params, b, train_mode=False)
        total += loss * k
        n += k
    return total / n


def pretrain(config: ModelConfig, data: Sequence[TextSpan | str],
             tok: TokenizerModel, hyper: OptimizerHyper,
             eval_set: Sequence[TextSpan | str], log_every: int = 100,
             seed: int = 0, mask_rate: float = 0.15,
             checkpoint_dir=None, run_id: str = "run",
             params: Optional[ModelParams] = None) -> tuple[ModelParams, RunLog]:
    """Single-epoch MLM pre-training loop.

    Deterministic for a fixed seed: initialization, data order (input
    order preserved), masking, and dropout all derive from it. Stops
    early if the data is exhausted before total_steps.
    """
    if params is None:
        params = model_mod.init_model(config, seed=seed)
    state = AdamWState.init(params.tensors)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    seqs = spans_to_sequences(data, tok, config.max_seq_len)
    eval_seqs = spans_to_sequences(eval_set, tok, config.max_seq_len)
    eval_batches = [_make_masked(tok, eval_seqs[i:i + 64], eval_rng, mask_rate)
                    for i in range(0, len(eval_seqs), 64)]

    c_seq = costmodel.flops_per_sequence(config).c_seq
    log = RunLog(config=config, hyper=hyper, seed=seed, run_id=run_id)
    if checkpoint_dir is not None:
        ckpt_dir = Path(checkpoint_dir) / run_id
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    bsz = hyper.batch_size
    n_batches = len(seqs) // bsz
    steps = min(hyper.total_steps, n_batches)
    if steps < hyper.total_steps:
        warnings.warn(f"data exhausted after {steps} steps "
                      f"(requested {hyper.total_steps})")

    last_train_loss = float("nan")
    for step in range(1, steps + 1):
        batch_seqs = seqs[(step - 1) * bsz: step * bsz]
        batch = _make_masked(tok, batch_seqs, rng, mask_rate)
        loss, grads = model_mod.mlm_loss_and_grads(
            params, batch, train_mode=config.dropout > 0, rng=rng)
        clip_gradients(grads, hyper.clip_norm)
        adamw_step(params.tensors, grads, state, hyper, lr_at(hyper, step))
        params.step = step
        params.tokens_seen += int(batch.attention_mask.sum())
        last_train_loss = loss
        if step % log_every == 0 or step == steps:
            eval_loss = evaluate_mlm(params, eval_batches)
            log.add(step, params.tokens_seen,
                    costmodel.total_flops(c_seq, step, bsz),
                    last_train_loss, eval_loss, model_mod.perplexity(eval_loss))
            if checkpoint_dir is not None:
                params.save(ckpt_dir / f"step_{step}.ckpt")
    return params, log


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class ClassificationTask:
    """A labeled sequence-classification dataset with a held-out split."""

    train_ids: np.ndarray
    train_labels: np.ndarray
    val_ids: np.ndarray
    val_labels: np.ndarray
    num_classes: int
    pad_id: Optional[int] = None  # pads are masked out of attention if set

    def attention_mask(self, ids: np.ndarray) -> Optional[np.ndarray]:
        if self.pad_id is None:
            return None
        return (ids != self.pad_id).astype(float)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == labels).mean())


def _eval_accuracy(params, head, task, ids, labels, batch=64):
    hits, n = 0, 0
    for i in range(0, len(ids), batch):
        logits, _ = model_mod.forward_classifier(
            params, head, ids[i:i + batch], labels[i:i + batch],
            attention_mask=task.attention_mask(ids[i:i + batch]))
        hits += int((logits.argmax(axis=-1) == labels[i:i + batch]).sum())
        n += len(labels[i:i + batch])
    return hits / n


def finetune(params: ModelParams, task: ClassificationTask,
             epochs: int = 5, batch: int = 32, peak_lr: float = 5e-4,
             seeds: Sequence[int] = (0, 1, 2),
             weight_decay: float = 0.01,
             head_only: bool = False) -> tuple[float, list[float]]:
    """Fine-tune with a linear schedule (5% warmup); returns the mean of
    each seed's best validation accuracy, plus the per-seed values.

    With head_only=True the encoder is frozen and only the classification
    head is trained (a linear probe of the encoder's representations)."""
    if len(task.val_ids) == 0:
        raise ValueError("empty validation split")
    steps_per_epoch = max(1, len(task.train_ids) // batch)
    total = epochs * steps_per_epoch
    hyper = OptimizerHyper(peak_lr=peak_lr, schedule="linear",
                           total_steps=total, batch_size=batch,
                           weight_decay=weight_decay)
    per_seed = []
    for seed in seeds:
        p = params.copy()
        head = model_mod.init_classifier_head(p.config, task.num_classes,
                                              seed=seed)
        trained = head if head_only else {**p.tensors, **head}
        state = AdamWState.init(trained)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        best = 0.0
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(task.train_ids))
            for b0 in range(steps_per_epoch):
                idx = order[b0 * batch:(b0 + 1) * batch]
                if len(idx) == 0:
                    continue
                step += 1
                _, _, grads, head_grads = model_mod.classifier_loss_and_grads(
                    p, head, task.train_ids[idx], task.train_labels[idx],
                    attention_mask=task.attention_mask(task.train_ids[idx]),
                    train_mode=not head_only and p.config.dropout > 0,
                    rng=rng)
                merged = head_grads if head_only else {**grads, **head_grads}
                clip_gradients(merged, hyper.clip_norm)
                adamw_step(trained, merged, state, hyper,
                           lr_at(hyper, min(step, total)))
            best = max(best, _eval_accuracy(p, head, task, task.val_ids,
                                            task.val_labels))
        per_seed.append(best)
    return float(np.mean(per_seed)), per_seed
