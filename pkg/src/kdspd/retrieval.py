"""Dense indexes, exact dot-product search and passage aggregation."""
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConflictError, ContractError, FormatError, ShapeError

INDEX_MAGIC = b"SPDI"
DEFAULT_WINDOW = 180
DEFAULT_STRIDE = 90
EMBED_CHUNK = 64


@dataclass
class RankedList:
    query_id: str
    entries: list = field(default_factory=list)  # (doc_id, score, lang)

    def doc_ids(self):
        return [e[0] for e in self.entries]

    def scores(self):
        return [e[1] for e in self.entries]

    def __len__(self):
        return len(self.entries)


def sort_entries(entries):
    """Descending score, ascending doc_id on ties."""
    return sorted(entries, key=lambda e: (-e[1], e[0]))


class DenseIndex:
    """Document vectors, one row per passage; ``owner`` maps rows to documents."""

    def __init__(self, dim, doc_ids, langs, vectors, owner=None):
        vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, dim)
        if len(set(doc_ids)) != len(doc_ids):
            raise ConflictError("duplicate doc_id in index")
        if len(langs) != len(doc_ids):
            raise ShapeError("langs and doc_ids differ in length")
        if owner is None:
            owner = np.arange(len(doc_ids), dtype=np.int64)
        owner = np.asarray(owner, dtype=np.int64)
        if owner.shape[0] != vectors.shape[0]:
            raise ShapeError("one owner per vector row required")
        self.dim = int(dim)
        self.doc_ids = list(doc_ids)
        self.langs = list(langs)
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self.owner = owner
        self.owner.setflags(write=False)
        # rank of each doc_id in ascending string order: the tie-break key
        order = sorted(range(len(self.doc_ids)), key=self.doc_ids.__getitem__)
        self.tie_key = np.empty(len(order), dtype=np.int64)
        self.tie_key[order] = np.arange(len(order))
        self.tie_key.setflags(write=False)

    def __len__(self):
        return len(self.doc_ids)

    @property
    def n_passages(self):
        return self.vectors.shape[0]

    def vector(self, doc_id):
        rows = np.flatnonzero(self.owner == self.doc_ids.index(doc_id))
        return self.vectors[rows]

    def doc_scores(self, query_vector):
        q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ShapeError(f"query dim {q.shape[0]} != index dim {self.dim}")
        passage = self.vectors.astype(np.float64) @ q
        if self.n_passages == len(self.doc_ids):
            return passage[np.argsort(self.owner, kind="stable")]
        return kernels.segment_max(passage, self.owner, len(self.doc_ids))


def search(index, query_vector, k, query_id="q"):
    """Exact top-``k`` documents by dot product (max over passages)."""
    if k < 1:
        raise ContractError("k must be >= 1")
    scores = index.doc_scores(query_vector)
    top = kernels.topk_desc(scores, index.tie_key, min(int(k), len(index)))
    return RankedList(query_id, [(index.doc_ids[i], float(scores[i]), index.langs[i])
                                 for i in top])


def split_passages(token_ids, window=DEFAULT_WINDOW, stride=DEFAULT_STRIDE):
    """Overlapping windows starting every ``stride`` tokens until the end is covered."""
    if window <= 0 or not 0 < stride <= window:
        raise ContractError("need window > 0 and 0 < stride <= window")
    token_ids = list(token_ids)
    if not token_ids:
        raise ContractError("cannot split an empty document")
    passages = []
    start = 0
    while True:
        passages.append(token_ids[start:start + window])
        if start + window >= len(token_ids):
            return passages
        start += stride


def max_passage_score(passage_scores):
    scores = list(passage_scores)
    if not scores:
        raise ContractError("no passage scores")
    return max(scores)


def worker_count():
    raw = os.environ.get("SPD_THREADS", "").strip()
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def index_collection(docs, model, window=None, stride=DEFAULT_STRIDE, workers=None):
    """Embed ``docs`` = [(doc_id, lang, token_ids)] into a DenseIndex.

    Documents longer than ``window`` tokens (default: what fits next to the
    language token) are split into passages.  Passages are embedded in fixed
    chunks of EMBED_CHUNK rows in input order, so the result does not depend
    on the worker count.
    """
    cfg = model.config
    if window is None:
        window = min(DEFAULT_WINDOW, cfg.max_seq_len - 1)
    stride = min(stride, window)
    seen = set()
    rows, langs_rows, owner = [], [], []
    for i, (doc_id, lang, ids) in enumerate(docs):
        if doc_id in seen:
            raise ConflictError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        cfg.lang_token_id(lang)
        for passage in split_passages(ids, window, stride) if ids else [[]]:
            rows.append(passage)
            langs_rows.append(lang)
            owner.append(i)
    chunks = [(s, min(s + EMBED_CHUNK, len(rows))) for s in range(0, len(rows), EMBED_CHUNK)]

    def run(bounds):
        s, e = bounds
        return model.embed(rows[s:e], langs_rows[s:e])

    n_workers = workers if workers is not None else worker_count()
    if n_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    vectors = np.concatenate(parts) if parts else np.zeros((0, cfg.d), dtype=np.float32)
    return DenseIndex(cfg.d, [d[0] for d in docs], [d[1] for d in docs], vectors, owner)


def index_from_vectors(doc_ids, langs, vectors):
    vectors = np.asarray(vectors, dtype=np.float32)
    return DenseIndex(vectors.shape[1], doc_ids, langs, vectors)


# ------------------------------------------------------------ index file

def save_index(path, index):
    header = {"dim": index.dim, "doc_ids": index.doc_ids, "langs": index.langs,
              "owner": index.owner.tolist()}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<I", len(blob)) + blob
                 + np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic (expected SPDI)")
    try:
        (n,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8:8 + n].decode("utf-8"))
        vec = np.frombuffer(buf, dtype="<f4", offset=8 + n).reshape(-1, header["dim"])
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt index ({exc})") from None
    return DenseIndex(header["dim"], header["doc_ids"], header["langs"], vec.copy(),
                      header["owner"])
