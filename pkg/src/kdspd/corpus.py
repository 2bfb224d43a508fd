"""Corpus ingestion, tokenization and synthetic cipher-language generation.

A cipher language re-spells every English word through a seeded
permutation of the word index.  A configurable fraction of words keep
their English spelling (cognates), which is what gives a never-trained
cipher language something to transfer from.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ConflictError, DataError, ParseError
from .evaluation import Qrels
from .model import N_SPECIAL, UNK_ID
from .retrieval import RankedList

ENGLISH = "en"
RUN_DEPTH = 1000


@dataclass(frozen=True)
class BitextPair:
    lang: str
    source: str
    english: str
    line: int = 0


# ------------------------------------------------------------- vocabulary

class Vocab:
    """Word ids start after PAD, UNK and ``max_languages`` language slots."""

    def __init__(self, words, max_languages=8):
        self.words = list(words)
        self.max_languages = int(max_languages)
        self.offset = N_SPECIAL + self.max_languages
        self.index = {w: self.offset + i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConflictError("duplicate word in vocabulary")

    def __len__(self):
        return self.offset + len(self.words)

    def __getitem__(self, word):
        return self.index[word]

    def get(self, word, default=UNK_ID):
        return self.index.get(word, default)

    def word(self, token_id):
        return self.words[token_id - self.offset]


def tokenize(text, vocab):
    """Whitespace split; unknown words map to UNK."""
    get = vocab.get if isinstance(vocab, Vocab) else (lambda w: vocab.get(w, UNK_ID))
    return [get(w) for w in text.split()]


# ------------------------------------------------------- cipher generator

@dataclass
class CipherSpec:
    n_languages: int = 3
    n_zero_shot_languages: int = 1
    vocab_size: int = 200
    n_topics: int = 25
    topic_words: int = 8
    topic_prob: float = 0.6
    cognate_fraction: float = 0.5
    sentence_len: tuple = (8, 16)
    doc_len: tuple = (12, 24)
    query_len: tuple = (3, 5)
    n_train_pairs: int = 2000
    n_heldout_pairs: int = 200
    docs_per_topic: int = 4
    queries_per_topic: int = 4
    max_grade: int = 2
    max_languages: int = 8

    def __post_init__(self):
        self.sentence_len = tuple(self.sentence_len)
        self.doc_len = tuple(self.doc_len)
        self.query_len = tuple(self.query_len)
        if self.n_topics * self.topic_words > self.vocab_size:
            raise ConfigError(f"vocab_size={self.vocab_size} cannot hold {self.n_topics} "
                              f"topics of {self.topic_words} distinct words")
        if self.n_languages < 1 or self.n_zero_shot_languages < 0:
            raise ConfigError("need at least one cipher language")
        if 1 + self.n_languages + self.n_zero_shot_languages > self.max_languages:
            raise ConfigError("more languages than reserved language-token slots")
        for lo, hi in (self.sentence_len, self.doc_len, self.query_len):
            if not 1 <= lo <= hi:
                raise ConfigError("length ranges must satisfy 1 <= lo <= hi")
        if self.query_len[1] > self.topic_words:
            raise ConfigError("queries draw distinct topic words; query_len too long")
        if not 0.0 <= self.cognate_fraction <= 1.0 or not 0.0 <= self.topic_prob <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]")

    @property
    def train_languages(self):
        return [ENGLISH] + [f"c{i}" for i in range(1, self.n_languages + 1)]

    @property
    def zero_shot_languages(self):
        start = self.n_languages + 1
        return [f"c{i}" for i in range(start, start + self.n_zero_shot_languages)]

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        return asdict(self)


def english_word(i):
    return f"w{i:03d}"


@dataclass
class Cipher:
    lang: str
    perm: np.ndarray        # English word index -> cipher word index
    cognate: np.ndarray     # bool per English word index

    def surface(self, i):
        if self.lang == ENGLISH or self.cognate[i]:
            return english_word(i)
        return f"{self.lang}w{int(self.perm[i]):03d}"

    def encode(self, english_text):
        return " ".join(self.surface(int(w[1:])) for w in english_text.split())

    def decode(self, text):
        inv = np.argsort(self.perm)
        out = []
        for w in text.split():
            if w.startswith(self.lang + "w") and self.lang != ENGLISH:
                out.append(english_word(int(inv[int(w[len(self.lang) + 1:])])))
            else:
                out.append(w)
        return " ".join(out)

    def words(self, vocab_size):
        return [self.surface(i) for i in range(vocab_size)]


@dataclass
class CipherCorpus:
    spec: CipherSpec
    seed: int
    ciphers: dict
    bitext: list
    heldout: list
    collection: list        # (doc_id, lang, text)
    collection_zs: list
    english_docs: dict      # group key -> English text
    queries: list           # (qid, text)
    qrels: Qrels
    qrels_zs: Qrels
    groups: dict            # qid -> [[(doc_id, lang), ...], ...]
    vocab: Vocab = field(default=None)

    @property
    def train_languages(self):
        return self.spec.train_languages

    @property
    def zero_shot_languages(self):
        return self.spec.zero_shot_languages


def _make_ciphers(spec, rng):
    V = spec.vocab_size
    ciphers = {ENGLISH: Cipher(ENGLISH, np.arange(V), np.ones(V, dtype=bool))}
    for lang in spec.train_languages[1:] + spec.zero_shot_languages:
        perm = rng.permutation(V)
        cognate = rng.random(V) < spec.cognate_fraction
        ciphers[lang] = Cipher(lang, perm, cognate)
    return ciphers


def _sample_text(rng, topic_core, vocab_size, topic_prob, length_range):
    n = int(rng.integers(length_range[0], length_range[1] + 1))
    words = []
    for _ in range(n):
        if rng.random() < topic_prob:
            words.append(int(topic_core[rng.integers(len(topic_core))]))
        else:
            words.append(int(rng.integers(vocab_size)))
    return " ".join(english_word(w) for w in words)


def gen_cipher_corpus(spec, seed=0):
    """Build bitext, a parallel multilingual collection, queries and judgments."""
    if isinstance(spec, dict):
        spec = CipherSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    V = spec.vocab_size
    ciphers = _make_ciphers(spec, rng)
    order = rng.permutation(V)
    topics = [order[t * spec.topic_words:(t + 1) * spec.topic_words]
              for t in range(spec.n_topics)]

    def sentence(length_range):
        core = topics[int(rng.integers(spec.n_topics))]
        return _sample_text(rng, core, V, spec.topic_prob, length_range)

    bitext, heldout = [], []
    for lang in spec.train_languages:
        c = ciphers[lang]
        for target, n in ((bitext, spec.n_train_pairs), (heldout, spec.n_heldout_pairs)):
            for _ in range(n):
                e = sentence(spec.sentence_len)
                target.append(BitextPair(lang, c.encode(e), e))

    english_docs = {}
    for t in range(spec.n_topics):
        for j in range(spec.docs_per_topic):
            english_docs[(t, j)] = _sample_text(rng, topics[t], V, spec.topic_prob, spec.doc_len)
    grade = {key: int(rng.integers(1, spec.max_grade + 1)) for key in english_docs}

    def doc_id(lang, t, j):
        return f"{lang}-t{t:03d}-d{j}"

    def build(langs):
        coll, qrels = [], Qrels()
        for (t, j), text in english_docs.items():
            for lang in langs:
                coll.append((doc_id(lang, t, j), lang, ciphers[lang].encode(text)))
                qrels.doc_lang[doc_id(lang, t, j)] = lang
        return coll, qrels

    collection, qrels = build(spec.train_languages)
    collection_zs, qrels_zs = build(spec.zero_shot_languages)

    queries, groups = [], {}
    for t in range(spec.n_topics):
        for i in range(spec.queries_per_topic):
            qid = f"q{t:03d}-{i}"
            n = int(rng.integers(spec.query_len[0], spec.query_len[1] + 1))
            words = rng.choice(topics[t], size=n, replace=False)
            queries.append((qid, " ".join(english_word(int(w)) for w in words)))
            groups[qid] = []
            for j in range(spec.docs_per_topic):
                g = grade[(t, j)]
                for lang in spec.train_languages:
                    qrels.add(qid, doc_id(lang, t, j), g)
                for lang in spec.zero_shot_languages:
                    qrels_zs.add(qid, doc_id(lang, t, j), g)
                groups[qid].append([(doc_id(lang, t, j), lang) for lang in spec.train_languages])

    words = set()
    for c in ciphers.values():
        words.update(c.words(V))
    vocab = Vocab(sorted(words), spec.max_languages)
    return CipherCorpus(spec, seed, ciphers, bitext, heldout, collection, collection_zs,
                        english_docs, queries, qrels, qrels_zs, groups, vocab)


# ------------------------------------------------------------------ files

CORPUS_FILES = {
    "bitext": "bitext.tsv",
    "heldout": "bitext_heldout.tsv",
    "collection": "collection.tsv",
    "collection_zs": "collection_zs.tsv",
    "queries": "queries.tsv",
    "qrels": "qrels.txt",
    "qrels_zs": "qrels_zs.txt",
    "groups": "groups.jsonl",
    "vocab": "vocab.json",
    "meta": "corpus.json",
}


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_bitext(path, pairs):
    _write_text(path, (f"{p.lang}\t{p.source}\t{p.english}" for p in pairs))


def write_collection(path, docs):
    _write_text(path, (f"{d}\t{lang}\t{text}" for d, lang, text in docs))


def write_queries(path, queries):
    _write_text(path, (f"{q}\t{text}" for q, text in queries))


def write_qrels(path, qrels):
    _write_text(path, (f"{q} 0 {d} {g}" for (q, d), g in qrels.grades.items()))


def write_groups(path, groups):
    _write_text(path, (json.dumps({"qid": q, "groups": [[list(m) for m in g] for g in gs]},
                                  separators=(",", ":"))
                       for q, gs in groups.items()))


def write_corpus(corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    f = {k: os.path.join(out_dir, v) for k, v in CORPUS_FILES.items()}
    write_bitext(f["bitext"], corpus.bitext)
    write_bitext(f["heldout"], corpus.heldout)
    write_collection(f["collection"], corpus.collection)
    write_collection(f["collection_zs"], corpus.collection_zs)
    write_queries(f["queries"], corpus.queries)
    write_qrels(f["qrels"], corpus.qrels)
    write_qrels(f["qrels_zs"], corpus.qrels_zs)
    write_groups(f["groups"], corpus.groups)
    with open(f["vocab"], "w", encoding="utf-8") as fh:
        json.dump({"max_languages": corpus.vocab.max_languages, "words": corpus.vocab.words},
                  fh, separators=(",", ":"))
        fh.write("\n")
    with open(f["meta"], "w", encoding="utf-8") as fh:
        json.dump({"seed": corpus.seed, "spec": corpus.spec.to_dict(),
                   "train_languages": corpus.train_languages,
                   "zero_shot_languages": corpus.zero_shot_languages},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return f


def _lines(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield n, line


def load_vocab(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return Vocab(d["words"], d.get("max_languages", 8))


def load_bitext(path, languages=None):
    """Parse ``lang<TAB>source<TAB>english`` rows; CRLF is accepted."""
    pairs = []
    for n, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 3:
            raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", path, n)
        lang, src, eng = cols
        if not src.strip() or not eng.strip():
            raise ParseError("empty sentence", path, n)
        if languages is not None and lang not in languages:
            raise DataError(f"{path}:{n}: unknown language code {lang!r}")
        pairs.append(BitextPair(lang, src, eng, n))
    return pairs


def load_collection(path):
    docs, seen = [], set()
    for n, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 3:
            raise ParseError(f"expected docid<TAB>lang<TAB>text, got {len(cols)} columns",
                             path, n)
        if cols[0] in seen:
            raise ConflictError(f"{path}:{n}: duplicate doc id {cols[0]!r}")
        seen.add(cols[0])
        docs.append((cols[0], cols[1], cols[2]))
    return docs


def load_queries(path):
    queries = []
    for n, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise ParseError(f"expected qid<TAB>text, got {len(cols)} columns", path, n)
        queries.append((cols[0], cols[1]))
    return queries


def load_qrels(path, doc_lang=None):
    """TREC qrels: ``qid 0 docid grade``."""
    qrels = Qrels(doc_lang=dict(doc_lang or {}))
    for n, line in _lines(path):
        cols = line.split()
        if len(cols) != 4:
            raise ParseError(f"expected 4 fields, got {len(cols)}", path, n)
        q, _, d, g = cols
        try:
            grade = int(g)
        except ValueError:
            raise ParseError(f"grade {g!r} is not an integer", path, n) from None
        if grade < 0:
            raise ParseError("negative grade", path, n)
        if (q, d) in qrels.grades:
            raise ConflictError(f"{path}:{n}: duplicate judgment for ({q}, {d})")
        qrels.grades[(q, d)] = grade
    return qrels


def load_groups(path):
    groups = {}
    for n, line in _lines(path):
        try:
            rec = json.loads(line)
            groups[rec["qid"]] = [[(m[0], m[1]) for m in g] for g in rec["groups"]]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"bad group record ({exc})", path, n) from None
    return groups


def format_run(runs, tag, depth=RUN_DEPTH):
    if isinstance(runs, RankedList):
        runs = {runs.query_id: runs}
    lines = []
    for qid, run in runs.items():
        for rank, (doc, score, _) in enumerate(run.entries[:depth], 1):
            lines.append(f"{qid} Q0 {doc} {rank} {score:.6f} {tag}")
    return lines


def write_run(path, runs, tag="kdspd", depth=RUN_DEPTH):
    """TREC run lines ``qid Q0 docid rank score tag``, at most ``depth`` per query."""
    _write_text(path, format_run(runs, tag, depth))


def load_run(path, doc_lang=None):
    runs = {}
    last_rank = {}
    seen = {}
    for n, line in _lines(path):
        cols = line.split()
        if len(cols) != 6:
            raise ParseError(f"expected 6 fields, got {len(cols)}", path, n)
        q, _, d, r, s, _tag = cols
        try:
            rank, score = int(r), float(s)
        except ValueError:
            raise ParseError("rank/score not numeric", path, n) from None
        if rank != last_rank.get(q, 0) + 1:
            raise ParseError(f"rank {rank} out of sequence for query {q}", path, n)
        last_rank[q] = rank
        lst = runs.setdefault(q, RankedList(q))
        docs = seen.setdefault(q, set())
        if d in docs:
            raise ConflictError(f"{path}:{n}: doc {d!r} repeated for query {q}")
        docs.add(d)
        lang = doc_lang.get(d) if doc_lang else None
        lst.entries.append((d, score, lang))
    return runs
