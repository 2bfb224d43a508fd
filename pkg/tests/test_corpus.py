import json

import pytest

from kdspd.corpus import (CORPUS_FILES, CipherSpec, Vocab, gen_cipher_corpus, load_bitext,
                          load_collection, load_groups, load_qrels, load_queries, load_run,
                          load_vocab, tokenize, write_corpus, write_run)
from kdspd.errors import ConfigError, ConflictError, DataError, ParseError
from kdspd.model import UNK_ID
from kdspd.retrieval import RankedList

SMALL = dict(n_languages=2, n_zero_shot_languages=1, vocab_size=40, n_topics=4, topic_words=5,
             n_train_pairs=30, n_heldout_pairs=5, docs_per_topic=2, queries_per_topic=2)


@pytest.fixture(scope="module")
def corpus():
    return gen_cipher_corpus(CipherSpec(**SMALL), seed=3)


def test_cipher_is_a_bijection(corpus):
    for lang in ("c1", "c2", "c3"):
        c = corpus.ciphers[lang]
        surfaces = c.words(40)
        assert len(set(surfaces)) == 40
        english = " ".join(f"w{i:03d}" for i in range(40))
        assert c.decode(c.encode(english)) == english


def test_cognates_and_disjoint_spellings(corpus):
    c1, c2 = corpus.ciphers["c1"], corpus.ciphers["c2"]
    own1 = {w for w in c1.words(40) if not w.startswith("w")}
    own2 = {w for w in c2.words(40) if not w.startswith("w")}
    assert own1 and own2 and not own1 & own2
    assert 0 < c1.cognate.sum() < 40  # expected half kept in English spelling


def test_bitext_is_parallel(corpus):
    assert len(corpus.bitext) == 3 * 30 and len(corpus.heldout) == 3 * 5
    for p in corpus.bitext:
        assert corpus.ciphers[p.lang].decode(p.source) == p.english
        if p.lang == "en":
            assert p.source == p.english


def test_collection_groups_and_qrels(corpus):
    assert len(corpus.collection) == 4 * 2 * 3
    assert len(corpus.collection_zs) == 4 * 2
    assert {lang for _, lang, _ in corpus.collection_zs} == {"c3"}
    texts = {d: t for d, _, t in corpus.collection}
    for qid, groups in corpus.groups.items():
        for g in groups:
            langs = [lang for _, lang in g]
            assert len(set(langs)) == len(langs) == 3
            decoded = {corpus.ciphers[lang].decode(texts[d]) for d, lang in g}
            assert len(decoded) == 1
            grades = {corpus.qrels.grades[(qid, d)] for d, _ in g}
            assert len(grades) == 1 and grades.pop() >= 1


def test_generation_is_deterministic(tmp_path):
    a = write_corpus(gen_cipher_corpus(CipherSpec(**SMALL), 3), tmp_path / "a")
    b = write_corpus(gen_cipher_corpus(CipherSpec(**SMALL), 3), tmp_path / "b")
    for key in CORPUS_FILES:
        with open(a[key], "rb") as fa, open(b[key], "rb") as fb:
            assert fa.read() == fb.read(), key


def test_spec_validation():
    with pytest.raises(ConfigError):
        CipherSpec(vocab_size=10, n_topics=5, topic_words=5)
    with pytest.raises(ConfigError):
        CipherSpec(n_languages=9)
    with pytest.raises(ConfigError):
        CipherSpec(sentence_len=(5, 2))


def test_vocab_and_tokenize():
    v = Vocab(["a", "b"], max_languages=3)
    assert v["a"] == 5 and len(v) == 7 and v.word(6) == "b"
    assert tokenize("a zz b", v) == [5, UNK_ID, 6]
    with pytest.raises(ConflictError):
        Vocab(["a", "a"])


def test_round_trip_files(corpus, tmp_path):
    f = write_corpus(corpus, tmp_path)
    assert load_bitext(f["bitext"]) == [type(p)(p.lang, p.source, p.english, i + 1)
                                        for i, p in enumerate(corpus.bitext)]
    assert load_collection(f["collection"]) == corpus.collection
    assert load_queries(f["queries"]) == corpus.queries
    assert load_qrels(f["qrels"]).grades == corpus.qrels.grades
    assert load_groups(f["groups"]) == corpus.groups
    assert load_vocab(f["vocab"]).words == corpus.vocab.words
    assert json.loads(open(f["meta"]).read())["train_languages"] == ["en", "c1", "c2"]


def test_bitext_parse_errors(tmp_path):
    p = tmp_path / "b.tsv"
    p.write_bytes(b"c1\tx y\tw001 w002\r\nc1\tonly two\n")
    with pytest.raises(ParseError) as info:
        load_bitext(p)
    assert info.value.line == 2 and str(p) in str(info.value)
    p.write_bytes(b"c1\tx\tw001\r\n")
    assert load_bitext(p)[0].english == "w001"  # CRLF tolerated
    with pytest.raises(DataError):
        load_bitext(p, languages=["en"])
    p.write_text("c1\t \tw001\n")
    with pytest.raises(ParseError):
        load_bitext(p)


def test_collection_and_qrels_errors(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("d1\ten\ta\nd1\ten\tb\n")
    with pytest.raises(ConflictError):
        load_collection(p)
    q = tmp_path / "qrels"
    q.write_text("q 0 d x\n")
    with pytest.raises(ParseError):
        load_qrels(q)
    q.write_text("q 0 d 1\nq 0 d 2\n")
    with pytest.raises(ConflictError):
        load_qrels(q)
    q.write_text("q 0 d -1\n")
    with pytest.raises(ParseError):
        load_qrels(q)


def test_run_round_trip_and_validation(tmp_path):
    runs = {"q1": RankedList("q1", [("a", 0.5, None), ("b", 0.25, None)]),
            "q2": RankedList("q2", [("c", 1.0, None)])}
    p = tmp_path / "run.txt"
    write_run(p, runs, tag="t")
    assert p.read_text().splitlines()[0] == "q1 Q0 a 1 0.500000 t"
    back = load_run(p)
    assert {q: r.doc_ids() for q, r in back.items()} == {"q1": ["a", "b"], "q2": ["c"]}
    p.write_text("q Q0 a 1 0.5 t\nq Q0 a 2 0.4 t\n")
    with pytest.raises(ConflictError):
        load_run(p)
    p.write_text("q Q0 a 1 0.5 t\nq Q0 b 3 0.4 t\n")
    with pytest.raises(ParseError):
        load_run(p)


def test_run_depth_cap(tmp_path):
    big = {"q": RankedList("q", [(f"d{i}", 1.0 - i / 2000, None) for i in range(1500)])}
    p = tmp_path / "r.txt"
    write_run(p, big)
    assert len(p.read_text().splitlines()) == 1000
