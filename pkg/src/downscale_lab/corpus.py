"""Vocabulary construction and vocabulary-closed corpus filtering.

A closed word vocabulary is built from transcript lines; raw documents
are then filtered either by sliding word windows (span mode) or by
admissible-sentence concatenation (sentence mode). Every emitted span is
vocabulary-closed: each non-numeric word, after normalization, belongs
to the vocabulary.
"""

from __future__ import annotations

import json
import os
import random
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

_WORD_CHARS = re.compile(r"[^a-z'\-]")
_DIGITS = re.compile(r"[0-9]")
_EDGE_PUNCT = re.compile(r"^[^0-9a-z]+|[^0-9a-z]+$")
_SENTENCE_END = re.compile(r"(?<=[.?!])\s+")
_REPEATED_BIGRAM = re.compile(r"(..)\1\1")


@dataclass(frozen=True)
class VocabularySpec:
    """Closed set of allowed lowercase words plus its exclusion stoplist."""

    words: frozenset[str]
    stoplist: frozenset[str] = frozenset()
    source_label: str = ""

    def __post_init__(self):
        bad = [w for w in self.words if _WORD_CHARS.search(w)]
        if bad:
            raise ValueError(f"words contain invalid characters: {bad[:5]}")
        if self.words & self.stoplist:
            raise ValueError("stoplist overlaps vocabulary")

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in sorted(self.words):
                f.write(w + "\n")

    @classmethod
    def load(cls, path, stoplist_path=None, source_label: str = "") -> "VocabularySpec":
        words = _read_word_file(path)
        stop = _read_word_file(stoplist_path) if stoplist_path else frozenset()
        return cls(words=frozenset(words - stop), stoplist=frozenset(stop),
                   source_label=source_label or str(path))


def _read_word_file(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as f:
        return frozenset(line.strip() for line in f if line.strip())


@dataclass(frozen=True)
class TextSpan:
    """A vocabulary-closed text span with its provenance."""

    text: str
    word_count: int
    origin: tuple[str, str, int]  # (corpus id, document id, offset)

    def to_json(self) -> str:
        return json.dumps({"text": self.text, "word_count": self.word_count,
                           "origin": list(self.origin)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TextSpan":
        d = json.loads(line)
        o = d["origin"]
        return cls(text=d["text"], word_count=d["word_count"],
                   origin=(o[0], o[1], int(o[2])))


@dataclass(frozen=True)
class FilterConfig:
    mode: str = "span"              # "span" or "sentence"
    span_size: int = 110
    stride: int = 30
    target_span_words: int = 110

    def __post_init__(self):
        if self.mode not in ("span", "sentence"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if not 0 < self.stride <= self.span_size:
            raise ValueError("require 0 < stride <= span_size")
        if self.target_span_words < 1:
            raise ValueError("target_span_words must be >= 1")


def clean_word(raw: str) -> str:
    """Lowercase and drop every character outside [a-z'-]."""
    return _WORD_CHARS.sub("", raw.lower())


def normalize_for_admissibility(raw: str) -> str:
    """Normalization used when checking a word against the vocabulary.

    Lowercase, delete numeric characters, strip leading/trailing
    punctuation; internal apostrophes and hyphens are kept. An empty
    result means the token carries no vocabulary content.
    """
    w = _DIGITS.sub("", raw.lower())
    return _EDGE_PUNCT.sub("", w)


def looks_gibberish(word: str) -> bool:
    """Heuristic flag for babble-like strings ("bababa"); advisory only."""
    return bool(_REPEATED_BIGRAM.search(word))


def build_vocabulary(transcript_lines: Iterable[str | bytes],
                     stoplist: Iterable[str] = (),
                     source_label: str = "") -> VocabularySpec:
    """Build the closed word set from transcript lines.

    Lines are whitespace-tokenized; each token is lowercased and stripped
    of special characters. Stoplist members and empty results are
    dropped. Byte lines that fail UTF-8 decoding are skipped and counted
    in the returned spec's source label.
    """
    stop = frozenset(stoplist)
    words: set[str] = set()
    bad_lines = 0
    for line in transcript_lines:
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError:
                bad_lines += 1
                continue
        for raw in line.split():
            w = clean_word(raw)
            if w and w not in stop:
                words.add(w)
    label = source_label
    if bad_lines:
        label = f"{label} [skipped {bad_lines} undecodable lines]".strip()
    return VocabularySpec(words=frozenset(words), stoplist=stop, source_label=label)


def word_admissible(raw: str, vocab: VocabularySpec) -> bool:
    w = normalize_for_admissibility(raw)
    return w == "" or w in vocab


def sentence_admissible(sentence: str, vocab: VocabularySpec) -> bool:
    """True iff every word of the sentence is vocabulary-closed.

    Numeric characters are ignored; a token that normalizes to the empty
    string (pure punctuation or digits) never disqualifies a sentence.
    """
    return all(word_admissible(w, vocab) for w in sentence.split())


def segment_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation followed by whitespace."""
    return [s for s in (_SENTENCE_END.split(text)) if s.strip()]


def _filter_document(doc: tuple[str, str], vocab: VocabularySpec,
                     cfg: FilterConfig, corpus_id: str) -> list[TextSpan]:
    doc_id, text = doc
    out: list[TextSpan] = []
    if cfg.mode == "span":
        words = text.split()
        n = len(words)
        if n < cfg.span_size:
            return out
        ok = [word_admissible(w, vocab) for w in words]
        # prefix sums let each window check run in O(1)
        bad_prefix = [0]
        for b in ok:
            bad_prefix.append(bad_prefix[-1] + (0 if b else 1))
        for off in range(0, n - cfg.span_size + 1, cfg.stride):
            if bad_prefix[off + cfg.span_size] - bad_prefix[off] == 0:
                out.append(TextSpan(
                    text=" ".join(words[off:off + cfg.span_size]),
                    word_count=cfg.span_size,
                    origin=(corpus_id, doc_id, off)))
    else:
        pending: list[str] = []
        pending_words = 0
        start_idx = 0

        def flush():
            nonlocal pending, pending_words
            if pending:
                text_out = " ".join(pending)
                out.append(TextSpan(text=text_out,
                                    word_count=len(text_out.split()),
                                    origin=(corpus_id, doc_id, start_idx)))
            pending, pending_words = [], 0

        for idx, sent in enumerate(segment_sentences(text)):
            if not sentence_admissible(sent, vocab):
                flush()
                continue
            n_words = len(sent.split())
            if pending and pending_words + n_words > cfg.target_span_words:
                flush()
            if not pending:
                start_idx = idx
            pending.append(sent.strip())
            pending_words += n_words
        flush()
    return out


def filter_corpus(documents: Iterable[tuple[str, str]], vocab: VocabularySpec,
                  cfg: FilterConfig, corpus_id: str = "corpus",
                  workers: int = 1) -> Iterator[TextSpan]:
    """Filter raw documents into vocabulary-closed spans.

    Span mode slides a window of ``span_size`` words with ``stride`` and
    keeps fully admissible windows. Sentence mode keeps admissible
    sentences and concatenates consecutive ones, closing a span before
    it would exceed ``target_span_words``. Output order is deterministic
    given input order, regardless of ``workers``.
    """
    workers = max(1, min(workers, _thread_cap()))
    if workers == 1:
        for doc in documents:
            yield from _filter_document(doc, vocab, cfg, corpus_id)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        args = ((doc, vocab, cfg, corpus_id) for doc in documents)
        for spans in pool.map(_filter_document_star, args, chunksize=16):
            yield from spans


def _filter_document_star(args):
    return _filter_document(*args)


def _thread_cap() -> int:
    """Global parallelism cap, settable via DOWNSCALE_LAB_THREADS."""
    raw = os.environ.get("DOWNSCALE_LAB_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 10 ** 6
    except ValueError:
        return 10 ** 6


def split_dataset(spans: Sequence[TextSpan], dev_size: int, test_size: int,
                  seed: int) -> tuple[list[TextSpan], list[TextSpan], list[TextSpan]]:
    """Disjoint train/dev/test partition via a seeded index shuffle."""
    n = len(spans)
    if dev_size < 0 or test_size < 0 or dev_size + test_size > n:
        raise ValueError(f"cannot draw dev={dev_size} + test={test_size} "
                         f"from {n} spans")
    idx = list(range(n))
    random.Random(seed).shuffle(idx)
    dev = [spans[i] for i in sorted(idx[:dev_size])]
    test = [spans[i] for i in sorted(idx[dev_size:dev_size + test_size])]
    train = [spans[i] for i in sorted(idx[dev_size + test_size:])]
    return train, dev, test


def read_documents_jsonl(path) -> Iterator[tuple[str, str]]:
    """Yield (doc id, text) from a JSONL file with a "text" field."""
    with open(path, "rb") as f:
        for i, raw in enumerate(f):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw.decode("utf-8"))
                yield (str(d.get("id", i)), d["text"])
            except (UnicodeDecodeError, json.JSONDecodeError, KeyError):
                continue  # skip undecodable/malformed documents


def write_spans_jsonl(spans: Iterable[TextSpan], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for span in spans:
            f.write(span.to_json() + "\n")
            n += 1
    return n


def read_spans_jsonl(path) -> list[TextSpan]:
    with open(path, encoding="utf-8") as f:
        return [TextSpan.from_json(line) for line in f if line.strip()]
