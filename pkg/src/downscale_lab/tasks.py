"""Synthetic vocabulary-closed classification tasks for fine-tuning.

The downstream benchmark is replaced by a word-family presence task: a
span is labeled positive iff it contains any of the target words. The
task stays inside the filtered vocabulary, so pre-trained
representations are directly applicable.
"""

from __future__ import annotations

import random
import re
from typing import Sequence

import numpy as np

from .corpus import TextSpan
from .tokenizer import TokenizerModel
from .trainer import ClassificationTask, spans_to_sequences


def make_word_presence_task(spans: Sequence[TextSpan | str],
                            tok: TokenizerModel,
                            target_words: Sequence[str],
                            seq_len: int = 64,
                            val_fraction: float = 0.25,
                            seed: int = 0,
                            max_examples: int = 1000) -> ClassificationTask:
    """Binary task: does the span contain any target word?

    Classes are balanced by down-sampling the majority class; the split
    into train/validation is a seeded shuffle.
    """
    pattern = re.compile(
        r"\b(" + "|".join(re.escape(w) for w in target_words) + r")\b",
        re.IGNORECASE)
    texts = [s.text if isinstance(s, TextSpan) else s for s in spans]
    labels = np.array([1 if pattern.search(t) else 0 for t in texts])
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("target words produce a single-class task")
    rng = np.random.default_rng(seed)
    k = min(len(pos), len(neg), max_examples // 2)
    keep = np.concatenate([rng.choice(pos, k, replace=False),
                           rng.choice(neg, k, replace=False)])
    rng.shuffle(keep)
    ids = spans_to_sequences([texts[i] for i in keep], tok, seq_len)
    y = labels[keep]
    n_val = max(1, int(len(keep) * val_fraction))
    return ClassificationTask(
        train_ids=ids[n_val:], train_labels=y[n_val:],
        val_ids=ids[:n_val], val_labels=y[:n_val], num_classes=2,
        pad_id=tok.pad_id)


def make_cloze_family_task(spans: Sequence[TextSpan | str],
                           tok: TokenizerModel,
                           families: Sequence[Sequence[str]],
                           seq_len: int = 16,
                           val_fraction: float = 0.25,
                           seed: int = 0,
                           max_examples: int = 1000) -> ClassificationTask:
    """Cloze-style task: the first word of each span is replaced by the
    mask token and the label is the index of the word family it came
    from. Spans whose first word is in no family (or several) are
    skipped; classes are balanced by down-sampling.

    The mask sits at position 0, which is also the pooled position of
    the classification head, so the label must be recovered from the
    surrounding context — the same problem the MLM objective poses.
    """
    lookup: dict[str, int] = {}
    for idx, fam in enumerate(families):
        for w in fam:
            lookup.setdefault(w.lower(), idx)
    texts = [s.text if isinstance(s, TextSpan) else s for s in spans]
    rows, labels = [], []
    for t in texts:
        parts = t.strip().split(" ", 1)
        if len(parts) < 2:
            continue
        label = lookup.get(parts[0].lower().strip(".,!?"))
        if label is None:
            continue
        ids = [tok.mask_id] + tok.encode(" " + parts[1])[:seq_len - 1]
        rows.append(ids + [tok.pad_id] * (seq_len - len(ids)))
        labels.append(label)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("families produce fewer than two classes")
    rng = np.random.default_rng(seed)
    k = min(int(min(np.bincount(y))), max_examples // len(classes))
    keep = np.concatenate([rng.choice(np.flatnonzero(y == c), k, replace=False)
                           for c in classes])
    rng.shuffle(keep)
    ids = np.asarray(rows, dtype=np.int64)[keep]
    y = y[keep]
    n_val = max(1, int(len(keep) * val_fraction))
    return ClassificationTask(
        train_ids=ids[n_val:], train_labels=y[n_val:],
        val_ids=ids[:n_val], val_labels=y[:n_val],
        num_classes=len(families), pad_id=tok.pad_id)


def make_acceptability_task(spans: Sequence[TextSpan | str],
                            tok: TokenizerModel,
                            seq_len: int = 16,
                            val_fraction: float = 0.25,
                            seed: int = 0,
                            max_examples: int = 1000) -> ClassificationTask:
    """Binary acceptability: natural word order (label 1) vs a seeded
    in-place shuffle of the same words (label 0), so the vocabulary is
    identical across classes.

    Each sequence is prefixed with the mask token as a pooling anchor
    for the first-position classification head: a masked position is
    the one place an MLM-trained encoder is explicitly optimized to
    summarize its context.
    """
    rng = random.Random(seed)
    texts = [s.text if isinstance(s, TextSpan) else s for s in spans]
    rows, labels = [], []
    for t in texts:
        if len(rows) >= max_examples:
            break
        t = t.strip()
        tail = "." if t.endswith(".") else ""
        words = t.rstrip(".").split()
        if len(words) < 3:
            continue
        label = rng.randrange(2)
        if label == 0:
            shuffled = words[:]
            while shuffled == words:
                rng.shuffle(shuffled)
            words = shuffled
        ids = [tok.mask_id] + tok.encode(" " + " ".join(words)
                                         + tail)[:seq_len - 1]
        rows.append(ids + [tok.pad_id] * (seq_len - len(ids)))
        labels.append(label)
    if len(set(labels)) < 2:
        raise ValueError("too few usable spans for a two-class task")
    ids = np.asarray(rows, dtype=np.int64)
    y = np.asarray(labels)
    n_val = max(1, int(len(y) * val_fraction))
    return ClassificationTask(
        train_ids=ids[n_val:], train_labels=y[n_val:],
        val_ids=ids[:n_val], val_labels=y[:n_val],
        num_classes=2, pad_id=tok.pad_id)


def save_task(task: ClassificationTask, path) -> None:
    with open(path, "wb") as f:  # keep the exact filename (no .npz suffix)
        np.savez(f, train_ids=task.train_ids, train_labels=task.train_labels,
                 val_ids=task.val_ids, val_labels=task.val_labels,
                 num_classes=np.array(task.num_classes),
                 pad_id=np.array(-1 if task.pad_id is None else task.pad_id))


def load_task(path) -> ClassificationTask:
    with np.load(path) as z:
        pad_id = int(z["pad_id"]) if "pad_id" in z else -1
        return ClassificationTask(
            train_ids=z["train_ids"], train_labels=z["train_labels"],
            val_ids=z["val_ids"], val_labels=z["val_labels"],
            num_classes=int(z["num_classes"]),
            pad_id=None if pad_id < 0 else pad_id)
