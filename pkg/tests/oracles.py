"""Brute-force references kept separate from the package code they check."""
import numpy as np


def metric_reference(kind, cutoff, ranking, rels):
    """One query's metric from array formulas rather than running sums."""
    ranking = list(ranking)[:cutoff]
    grades = np.array([rels.get(d, 0) for d in ranking], dtype=np.float64)
    binary = (grades >= 1).astype(np.float64)
    n_rel = float(sum(1 for g in rels.values() if g >= 1))
    if kind == "map":
        prec = np.cumsum(binary) / np.arange(1, len(binary) + 1)
        return float((prec * binary).sum() / n_rel)
    if kind == "mrr":
        hits = np.flatnonzero(binary)
        return 0.0 if hits.size == 0 else 1.0 / (hits[0] + 1)
    top = binary[:cutoff]
    if kind == "p":
        return float(top.sum() / cutoff)
    if kind == "r":
        return float(top.sum() / n_rel)
    if kind == "ndcg":
        g = grades[:cutoff]
        disc = 1.0 / np.log2(np.arange(2, g.size + 2))
        dcg = float(((2.0 ** g - 1.0) * disc).sum())
        ideal = np.sort(np.array(list(rels.values()), dtype=np.float64))[::-1][:cutoff]
        idisc = 1.0 / np.log2(np.arange(2, ideal.size + 2))
        return dcg / float(((2.0 ** ideal - 1.0) * idisc).sum())
    raise ValueError(kind)


def metric_mean_reference(kind, cutoff, runs, grades):
    """Mean over queries that have a relevant document; ``runs`` qid -> [doc ids]."""
    by_q = {}
    for (q, d), g in grades.items():
        by_q.setdefault(q, {})[d] = g
    vals = [metric_reference(kind, cutoff, runs.get(q, []), rels)
            for q, rels in by_q.items() if max(rels.values()) >= 1]
    return float(np.mean(vals)) if vals else 0.0


def search_reference(doc_ids, vectors, query, k):
    """Full sort by (-score, doc_id) computed in float64."""
    scores = np.asarray(vectors, dtype=np.float32).astype(np.float64) @ np.asarray(query,
                                                                                  np.float64)
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))
    return [(doc_ids[i], float(scores[i])) for i in order[:k]]


def random_instance(rng, n_docs_max=30, n_queries_max=6):
    """Random graded judgments and runs (runs may omit judged docs and vice versa)."""
    n_docs = int(rng.integers(1, n_docs_max + 1))
    docs = [f"d{i}" for i in range(n_docs)]
    grades, runs = {}, {}
    for qi in range(int(rng.integers(1, n_queries_max + 1))):
        q = f"q{qi}"
        for d in docs:
            if rng.random() < 0.4:
                grades[(q, d)] = int(rng.integers(0, 4))
        if rng.random() < 0.9:
            depth = int(rng.integers(0, n_docs + 1))
            runs[q] = list(rng.permutation(docs)[:depth])
    return grades, runs
