"""Shared fixtures: a synthetic child-language corpus with templated
structure, plus small trained artifacts reused across test modules."""

from __future__ import annotations

import random

import pytest

from downscale_lab import corpus as corpus_mod, tokenizer as tok_mod

NOUNS = ["dog", "cat", "bird", "fish", "baby", "ball", "book", "tree",
         "house", "truck", "duck", "horse", "cow", "apple", "banana",
         "cookie", "chair", "table", "door", "window", "shoe", "hat",
         "cup", "spoon", "bear", "lion", "mouse", "rabbit", "frog", "train"]
VERBS = ["sees", "likes", "wants", "finds", "holds", "takes", "gives",
         "shows", "hears", "follows", "watches", "pushes", "pulls",
         "carries", "drops"]
ADJS = ["big", "small", "red", "blue", "green", "happy", "sad", "old",
        "new", "soft", "warm", "cold", "funny", "little", "round"]
FUNCTION = ["the", "a", "and", "then", "now", "look", "here", "there"]

ALL_WORDS = NOUNS + VERBS + ADJS + FUNCTION
OOV_WORDS = ["zeitgeist", "quixotic", "obfuscate", "panacea"]


def make_sentence(rng: random.Random) -> str:
    t = rng.randrange(4)
    n1, n2 = rng.choice(NOUNS), rng.choice(NOUNS)
    v = rng.choice(VERBS)
    adj = rng.choice(ADJS)
    if t == 0:
        return f"the {adj} {n1} {v} the {n2}."
    if t == 1:
        return f"look the {n1} {v} a {adj} {n2}."
    if t == 2:
        return f"a {n1} and a {n2} {v} the {adj} {rng.choice(NOUNS)}."
    return f"now the {n1} {v} the {n2} and the {n2} {v} the {n1}."


def make_document(rng: random.Random, n_sentences: int,
                  oov_rate: float = 0.0) -> str:
    sents = []
    for _ in range(n_sentences):
        s = make_sentence(rng)
        if oov_rate and rng.random() < oov_rate:
            words = s.split()
            words.insert(rng.randrange(len(words)), rng.choice(OOV_WORDS))
            s = " ".join(words)
        sents.append(s)
    return " ".join(sents)


@pytest.fixture(scope="session")
def vocab():
    return corpus_mod.build_vocabulary(
        [" ".join(ALL_WORDS)], stoplist=set(), source_label="fixture")


@pytest.fixture(scope="session")
def fixture_documents():
    """50 documents with known OOV placements (seeded)."""
    rng = random.Random(1234)
    return [(f"doc{i}", make_document(rng, n_sentences=30, oov_rate=0.15))
            for i in range(50)]


@pytest.fixture(scope="session")
def clean_spans(vocab):
    """Vocabulary-closed spans from a larger clean corpus, span mode."""
    rng = random.Random(99)
    docs = [(f"clean{i}", make_document(rng, n_sentences=40))
            for i in range(120)]
    cfg = corpus_mod.FilterConfig(mode="span", span_size=110, stride=30)
    return list(corpus_mod.filter_corpus(docs, vocab, cfg, corpus_id="clean"))


@pytest.fixture(scope="session")
def small_tokenizer(clean_spans):
    return tok_mod.train_bpe(clean_spans[:200], vocab_size=600)
