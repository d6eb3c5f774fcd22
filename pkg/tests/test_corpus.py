import random

import pytest

from downscale_lab import corpus as cm
from .conftest import make_document, OOV_WORDS


def brute_force_span_filter(docs, vocab, cfg, corpus_id):
    """Independent oracle: enumerate every window directly."""
    out = []
    for doc_id, text in docs:
        words = text.split()
        for off in range(0, len(words) - cfg.span_size + 1, cfg.stride):
            win = words[off:off + cfg.span_size]
            if all(cm.word_admissible(w, vocab) for w in win):
                out.append(cm.TextSpan(" ".join(win), cfg.span_size,
                                       (corpus_id, doc_id, off)))
    return out


def test_clean_word():
    assert cm.clean_word("Hello!") == "hello"
    assert cm.clean_word("don't") == "don't"
    assert cm.clean_word("well-being") == "well-being"
    assert cm.clean_word("123") == ""


def test_normalize_for_admissibility():
    assert cm.normalize_for_admissibility("Dog,") == "dog"
    assert cm.normalize_for_admissibility("'cause") == "cause"
    assert cm.normalize_for_admissibility("b4") == "b"
    assert cm.normalize_for_admissibility("42") == ""
    assert cm.normalize_for_admissibility("!!!") == ""


def test_looks_gibberish():
    assert cm.looks_gibberish("bababa")
    assert not cm.looks_gibberish("banana")


def test_build_vocabulary_skips_undecodable():
    spec = cm.build_vocabulary(["the dog", b"\xff\xfe bad", b"good cat"],
                               stoplist=["the"])
    assert spec.words == frozenset({"dog", "good", "cat"})
    assert "skipped 1" in spec.source_label


def test_vocabulary_spec_invariants():
    with pytest.raises(ValueError):
        cm.VocabularySpec(words=frozenset({"Bad!"}))
    with pytest.raises(ValueError):
        cm.VocabularySpec(words=frozenset({"dog"}),
                          stoplist=frozenset({"dog"}))


def test_sentence_admissible(vocab):
    assert cm.sentence_admissible("the big dog sees the cat.", vocab)
    assert not cm.sentence_admissible("the zeitgeist sees the cat.", vocab)
    # pure punctuation / digits never disqualify
    assert cm.sentence_admissible("the dog ... 42 sees the cat!", vocab)


def test_segment_sentences():
    text = "the dog runs. look here! is it a cat? yes."
    assert cm.segment_sentences(text) == [
        "the dog runs.", "look here!", "is it a cat?", "yes."]


def test_span_filter_matches_brute_force(fixture_documents, vocab):
    cfg = cm.FilterConfig(mode="span", span_size=40, stride=7)
    got = list(cm.filter_corpus(fixture_documents, vocab, cfg, "fx"))
    want = brute_force_span_filter(fixture_documents, vocab, cfg, "fx")
    assert got == want
    assert got, "fixture corpus should yield at least one span"


def test_span_filter_windows_are_closed(clean_spans, vocab):
    for span in clean_spans[:50]:
        assert all(cm.word_admissible(w, vocab) for w in span.text.split())
        assert span.word_count == 110


def test_oov_never_survives(fixture_documents, vocab):
    cfg = cm.FilterConfig(mode="span", span_size=20, stride=5)
    for span in cm.filter_corpus(fixture_documents, vocab, cfg, "fx"):
        assert not any(w in OOV_WORDS for w in span.text.split())


def test_sentence_mode(vocab):
    rng = random.Random(7)
    docs = [("d0", make_document(rng, 25, oov_rate=0.3))]
    cfg = cm.FilterConfig(mode="sentence", target_span_words=30)
    spans = list(cm.filter_corpus(docs, vocab, cfg, "fx"))
    assert spans
    for span in spans:
        # every kept sentence is admissible and spans respect the cap
        # (a single long sentence may exceed it, none occur here)
        assert cm.sentence_admissible(span.text, vocab)
        assert span.word_count <= 30
        assert span.word_count == len(span.text.split())


def test_sentence_mode_breaks_on_inadmissible(vocab):
    text = "the dog sees the cat. the zeitgeist runs. the cat sees the dog."
    cfg = cm.FilterConfig(mode="sentence", target_span_words=100)
    spans = list(cm.filter_corpus([("d", text)], vocab, cfg, "fx"))
    assert [s.text for s in spans] == ["the dog sees the cat.",
                                      "the cat sees the dog."]
    assert [s.origin[2] for s in spans] == [0, 2]


def test_parallel_matches_sequential(fixture_documents, vocab, monkeypatch):
    monkeypatch.setenv("DOWNSCALE_LAB_THREADS", "2")
    cfg = cm.FilterConfig(mode="span", span_size=30, stride=10)
    seq = list(cm.filter_corpus(fixture_documents, vocab, cfg, "fx", workers=1))
    par = list(cm.filter_corpus(fixture_documents, vocab, cfg, "fx", workers=4))
    assert seq == par


def test_filter_idempotent(fixture_documents, vocab):
    cfg = cm.FilterConfig(mode="span", span_size=25, stride=25)
    a = list(cm.filter_corpus(fixture_documents, vocab, cfg, "fx"))
    b = list(cm.filter_corpus(fixture_documents, vocab, cfg, "fx"))
    assert a == b


def test_split_dataset_deterministic(clean_spans):
    t1, d1, s1 = cm.split_dataset(clean_spans, 10, 10, seed=3)
    t2, d2, s2 = cm.split_dataset(clean_spans, 10, 10, seed=3)
    assert (t1, d1, s1) == (t2, d2, s2)
    assert len(d1) == 10 and len(s1) == 10
    assert len(t1) + 20 == len(clean_spans)
    seen = {id(x) for x in t1} | {id(x) for x in d1} | {id(x) for x in s1}
    assert len(seen) == len(clean_spans)


def test_split_dataset_rejects_oversize(clean_spans):
    with pytest.raises(ValueError):
        cm.split_dataset(clean_spans[:5], 4, 4, seed=0)


def test_span_jsonl_roundtrip(clean_spans, tmp_path):
    path = tmp_path / "spans.jsonl"
    n = cm.write_spans_jsonl(clean_spans[:25], path)
    assert n == 25
    assert cm.read_spans_jsonl(path) == clean_spans[:25]


def test_read_documents_jsonl(tmp_path):
    p = tmp_path / "docs.jsonl"
    with open(p, "wb") as f:
        f.write(b'{"id": "a", "text": "the dog"}\n')
        f.write(b'not json\n')
        f.write(b'{"text": "the cat"}\n')
    docs = list(cm.read_documents_jsonl(p))
    assert docs == [("a", "the dog"), ("2", "the cat")]


def test_vocab_save_load(vocab, tmp_path):
    p = tmp_path / "vocab.txt"
    vocab.save(p)
    loaded = cm.VocabularySpec.load(p)
    assert loaded.words == vocab.words
