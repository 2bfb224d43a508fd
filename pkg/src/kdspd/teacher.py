"""Frozen teacher embeddings for documents and queries.

Two providers: a synthetic hashed bag-of-tokens map, and a file-backed
lookup over precomputed vectors stored in the ``SPDE`` embedding format.
"""
import hashlib
import struct
from functools import lru_cache

import numpy as np

from .errors import ConflictError, ContractError, FormatError, MissingKeyError

EMBEDDING_MAGIC = b"SPDE"


class SyntheticTeacher:
    """Sum of per-token pseudorandom unit vectors, L2-normalized.

    Each whitespace token is hashed together with ``salt`` and ``seed`` into
    the seed of its own Gaussian draw, so vectors are independent of
    vocabulary order and of which other tokens have been seen.
    """

    kind = "synthetic"

    def __init__(self, dim, seed=0, salt="kdspd"):
        self.dim = int(dim)
        self.seed = int(seed)
        self.salt = str(salt)
        self._token_vector = lru_cache(maxsize=None)(self._make_token_vector)

    def _make_token_vector(self, token):
        h = hashlib.blake2b(f"{self.salt}\x1f{self.seed}\x1f{token}".encode("utf-8"),
                            digest_size=8)
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        return v

    def embed(self, text):
        tokens = text.split()
        if not tokens:
            raise ContractError("synthetic teacher needs non-empty text")
        acc = np.zeros(self.dim)
        for tok in sorted(tokens):
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm == 0.0:  # pragma: no cover - measure-zero event
            raise ContractError("token vectors cancelled exactly")
        return acc / norm

    def query(self, text):
        return self.embed(text)


class FileTeacher:
    """Precomputed vectors keyed by exact raw text."""

    kind = "file-backed"

    def __init__(self, dim, documents=None, queries=None):
        self.dim = int(dim)
        self._docs = dict(documents or {})
        self._queries = dict(queries or {})

    def __len__(self):
        return len(self._docs)

    def keys(self):
        return list(self._docs)

    def query_keys(self):
        return list(self._queries)

    def embed(self, text):
        try:
            return self._docs[text]
        except KeyError:
            raise MissingKeyError(f"no document vector for key {text!r}") from None

    def query(self, text):
        try:
            return self._queries[text]
        except KeyError:
            raise MissingKeyError(f"no query vector for key {text!r}") from None


def synthetic_embed(english_text, provider):
    if not isinstance(provider, SyntheticTeacher):
        raise ContractError("synthetic_embed needs a synthetic provider")
    return provider.embed(english_text)


def teacher_query_embed(query_text, provider):
    return provider.query(query_text)


def embed_texts(provider, texts, query=False):
    """Stack teacher vectors for ``texts`` into an (n, dim) float64 array."""
    fn = provider.query if query else provider.embed
    if not texts:
        return np.zeros((0, provider.dim))
    return np.stack([fn(t) for t in texts])


# ------------------------------------------------------------ file format

def write_teacher_file(path, dim, documents=None, queries=None):
    """Write the SPDE embedding file; sections are emitted D then Q, keys sorted."""
    sections = []
    if documents is not None:
        sections.append((b"D", documents))
    if queries is not None:
        sections.append((b"Q", queries))
    out = [EMBEDDING_MAGIC, struct.pack("<II", int(dim), len(sections))]
    for tag, records in sections:
        out.append(tag)
        out.append(struct.pack("<Q", len(records)))
        for key in sorted(records):
            vec = np.asarray(records[key], dtype="<f4")
            if vec.shape != (dim,):
                raise FormatError(f"vector for {key!r} has shape {vec.shape}, expected ({dim},)")
            kb = key.encode("utf-8")
            out.append(struct.pack("<I", len(kb)))
            out.append(kb)
            out.append(vec.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_teacher_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()

    def fail(msg):
        raise FormatError(f"{path}: {msg}")

    if buf[:4] != EMBEDDING_MAGIC:
        fail("bad magic (expected SPDE)")
    try:
        dim, n_sections = struct.unpack_from("<II", buf, 4)
        pos = 12
        found = {b"D": None, b"Q": None}
        for _ in range(n_sections):
            tag = buf[pos:pos + 1]
            pos += 1
            if tag not in found:
                fail(f"unknown section tag {tag!r}")
            if found[tag] is not None:
                fail(f"repeated section {tag.decode()}")
            (count,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            records = {}
            for _ in range(count):
                (kl,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                key = buf[pos:pos + kl].decode("utf-8")
                pos += kl
                if pos + 4 * dim > len(buf):
                    fail(f"truncated record {key!r}")
                vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
                pos += 4 * dim
                if key in records:
                    raise ConflictError(f"{path}: duplicate key {key!r}")
                vec.setflags(write=False)
                records[key] = vec
            found[tag] = records
    except (struct.error, UnicodeDecodeError) as exc:
        fail(f"malformed embedding file ({exc})")
    if pos != len(buf):
        fail("trailing bytes after last section (dimension mismatch?)")
    return FileTeacher(dim, found[b"D"], found[b"Q"])
