"""IR metrics, rank-list merging, significance tests and language-bias analysis."""
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, ConflictError, ContractError, DataError
from .retrieval import RankedList

EVAL_DEPTH = 100
PARALLEL_DEPTH = 1000


@dataclass
class Qrels:
    grades: dict = field(default_factory=dict)     # (qid, docid) -> int
    doc_lang: dict = field(default_factory=dict)   # docid -> lang

    def __post_init__(self):
        for key, g in self.grades.items():
            if int(g) != g or g < 0:
                raise DataError(f"invalid grade {g!r} for {key}")

    def add(self, qid, docid, grade):
        if (qid, docid) in self.grades:
            raise ConflictError(f"duplicate judgment for ({qid}, {docid})")
        if grade < 0:
            raise DataError(f"negative grade for ({qid}, {docid})")
        self.grades[(qid, docid)] = int(grade)

    def queries(self):
        return sorted({q for q, _ in self.grades})

    def for_query(self, qid):
        return {d: g for (q, d), g in self.grades.items() if q == qid}

    def by_query(self):
        out = {}
        for (q, d), g in self.grades.items():
            out.setdefault(q, {})[d] = g
        return out


# ---------------------------------------------------------------- metrics

_METRIC_RE = re.compile(r"^(map|mrr|ndcg|p|r|recall)(?:@(\d+))?$")


def parse_metric(name):
    m = _METRIC_RE.match(name.strip().lower())
    if not m:
        raise ConfigError(f"unknown metric {name!r}")
    kind, cut = m.group(1), m.group(2)
    if kind == "recall":
        kind = "r"
    cutoff = int(cut) if cut else None
    if kind in ("p", "r") and cutoff is None:
        raise ConfigError(f"metric {name!r} needs a cutoff, e.g. {kind}@10")
    return kind, cutoff


def _query_metric(kind, cutoff, ranked_ids, rels):
    ranking = ranked_ids if cutoff is None else ranked_ids[:cutoff]
    n_rel = sum(1 for g in rels.values() if g >= 1)
    if kind == "map":
        hits, total = 0, 0.0
        for i, doc in enumerate(ranking, 1):
            if rels.get(doc, 0) >= 1:
                hits += 1
                total += hits / i
        return total / n_rel
    if kind == "mrr":
        for i, doc in enumerate(ranking, 1):
            if rels.get(doc, 0) >= 1:
                return 1.0 / i
        return 0.0
    if kind == "p":
        return sum(1 for doc in ranking if rels.get(doc, 0) >= 1) / cutoff
    if kind == "r":
        return sum(1 for doc in ranking if rels.get(doc, 0) >= 1) / n_rel
    if kind == "ndcg":
        dcg = sum((2.0 ** rels.get(doc, 0) - 1.0) / math.log2(i + 1)
                  for i, doc in enumerate(ranking, 1))
        ideal = sorted(rels.values(), reverse=True)[:cutoff]
        idcg = sum((2.0 ** g - 1.0) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
        return dcg / idcg
    raise ConfigError(f"unknown metric kind {kind!r}")  # pragma: no cover


def compute_metric(metric, runs, qrels, cutoff=None):
    """Per-query values and their mean for one metric.

    ``metric`` is a name such as ``"map"``, ``"ndcg@10"``, ``"p@10"``,
    ``"mrr"`` or ``"r@100"``; an explicit ``cutoff`` overrides the suffix.
    ``runs`` maps query id to RankedList (a single RankedList is accepted).
    Queries without a relevant document are skipped; queries judged but
    absent from ``runs`` score 0.
    """
    kind, cut = parse_metric(metric)
    if cutoff is not None:
        cut = int(cutoff)
    if isinstance(runs, RankedList):
        runs = {runs.query_id: runs}
    per_query = {}
    for qid, rels in sorted(qrels.by_query().items()):
        if not any(g >= 1 for g in rels.values()):
            continue
        run = runs.get(qid)
        ranked = run.doc_ids() if run is not None else []
        per_query[qid] = _query_metric(kind, cut, ranked, rels)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return per_query, mean


def evaluate_run(runs, qrels, metrics=("map", "ndcg@10", "p@10", "mrr", "r@100")):
    return {m: compute_metric(m, runs, qrels) for m in metrics}


def random_ranking_mrr(n_docs, n_relevant):
    """Expected reciprocal rank of the first relevant doc under a uniform shuffle."""
    if n_relevant < 1 or n_relevant > n_docs:
        raise ContractError("need 1 <= n_relevant <= n_docs")
    # P(first relevant at rank r) = C(n-r, R-1) / C(n, R)
    total = math.comb(n_docs, n_relevant)
    return sum(math.comb(n_docs - r, n_relevant - 1) / total / r
               for r in range(1, n_docs - n_relevant + 2))


# ----------------------------------------------------------------- merging

def _check_disjoint(lists):
    qids = {lst.query_id for lst in lists}
    if len(qids) > 1:
        raise ContractError(f"lists for different queries: {sorted(qids)}")
    seen = set()
    for lst in lists:
        for doc in lst.doc_ids():
            if doc in seen:
                raise ConflictError(f"doc {doc!r} appears in more than one list")
            seen.add(doc)


def merge_round_robin(lists, seed=0, draw=None):
    """Interleave lists one document per list per round, rounds in random order.

    ``draw(round_index, active_list_indices)`` may override the random order;
    by default each round permutes the non-exhausted lists with a generator
    seeded from ``seed``.
    """
    if not lists:
        raise ContractError("nothing to merge")
    _check_disjoint(lists)
    rng = np.random.default_rng(seed)
    if draw is None:
        def draw(_round, active):
            return [active[i] for i in rng.permutation(len(active))]
    pos = [0] * len(lists)
    merged = []
    rnd = 0
    while True:
        active = [i for i, lst in enumerate(lists) if pos[i] < len(lst.entries)]
        if not active:
            break
        for i in draw(rnd, active):
            merged.append(lists[i].entries[pos[i]])
            pos[i] += 1
        rnd += 1
    entries = [(doc, 1.0 / r, lang) for r, (doc, _, lang) in enumerate(merged, 1)]
    return RankedList(lists[0].query_id, entries)


def min_max(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full_like(scores, 0.5)
    return (scores - lo) / (hi - lo)


def merge_by_score(lists):
    """Min-max normalize each list, then sort everything by normalized score."""
    if not lists:
        raise ContractError("nothing to merge")
    _check_disjoint(lists)
    pooled = []
    for lst in lists:
        norm = min_max(lst.scores())
        pooled.extend((doc, float(s), lang) for (doc, _, lang), s in zip(lst.entries, norm))
    pooled.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(lists[0].query_id, pooled)


# -------------------------------------------------------- parallel bias

def parallel_doc_analysis(runs, groups, depth=PARALLEL_DEPTH):
    """Rank distance and score spread among parallel copies of relevant docs.

    ``groups`` maps qid to a list of groups, each a list of (doc_id, lang).
    A group counts only if all its copies are within the top ``depth`` of
    the query's run.  Per query the group values are averaged, then the
    query values are averaged.
    """
    if not groups or not any(groups.values()):
        raise ContractError("no parallel groups given")
    per_query = {}
    total = covered = 0
    for qid in sorted(groups):
        run = runs.get(qid)
        where = {}
        if run is not None:
            for rank, (doc, score, _) in enumerate(run.entries[:depth], 1):
                where[doc] = (rank, score)
        d_scores, d_ranks = [], []
        for group in groups[qid]:
            if not group:
                raise ContractError(f"empty group for query {qid}")
            total += 1
            hits = [where.get(doc) for doc, _ in group]
            if any(h is None for h in hits):
                continue
            covered += 1
            ranks = [h[0] for h in hits]
            scores = [h[1] for h in hits]
            d_scores.append(max(scores) - min(scores))
            d_ranks.append(max(ranks) - min(ranks))
        if d_scores:
            per_query[qid] = {"score_diff": float(np.mean(d_scores)),
                              "rank_distance": float(np.mean(d_ranks)),
                              "groups": len(d_scores)}
    vals_s = [v["score_diff"] for v in per_query.values()]
    vals_r = [v["rank_distance"] for v in per_query.values()]
    return {
        "S": float(np.mean(vals_s)) if vals_s else float("nan"),
        "rank_distance": float(np.mean(vals_r)) if vals_r else float("nan"),
        "score_diff_std": float(np.std(vals_s)) if vals_s else float("nan"),
        "rank_distance_std": float(np.std(vals_r)) if vals_r else float("nan"),
        "groups_total": total,
        "groups_covered": covered,
        "groups_skipped": total - covered,
        "per_query": per_query,
    }


# ------------------------------------------------------------ t-test

def paired_t_test(per_query_a, per_query_b):
    """Two-sided paired t-test over query-aligned scores.

    Dicts are aligned on their (identical) key sets; sequences by position.
    Zero-variance differences yield p = 1.0 when the mean difference is 0
    and p = 0.0 otherwise (t is then reported as nan / ±inf).
    """
    if isinstance(per_query_a, dict) or isinstance(per_query_b, dict):
        if set(per_query_a) != set(per_query_b):
            raise ContractError("per-query dicts cover different queries")
        keys = sorted(per_query_a)
        a = np.array([per_query_a[k] for k in keys], dtype=np.float64)
        b = np.array([per_query_b[k] for k in keys], dtype=np.float64)
    else:
        a = np.asarray(per_query_a, dtype=np.float64)
        b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ContractError("paired t-test needs at least 2 queries")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return float("nan"), 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


# ------------------------------------------------------ biased relevance

def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def biased_relevance_split(qrels, groups, languages, primary_fraction=0.6, seed=0):
    """Keep each relevant document in one language, favouring a primary one.

    For every query a seeded draw picks the primary language.  Relevant
    groups are sorted by grade (descending, then group order); the first
    ``round(primary_fraction * n)`` (at least one) stay relevant in the
    primary language, the rest are dealt in contiguous runs to the other
    languages in ``languages`` order, earlier languages taking the
    remainder.
    """
    languages = list(languages)
    rng = np.random.default_rng(seed)
    out = Qrels(doc_lang=dict(qrels.doc_lang))
    for qid in sorted(groups):
        rels = qrels.for_query(qid)
        ranked = []
        for gi, group in enumerate(groups[qid]):
            by_lang = {lang: doc for doc, lang in group}
            if set(by_lang) != set(languages):
                raise DataError(f"query {qid}: group {gi} is not parallel across {languages}")
            grade_set = {rels.get(doc, 0) for doc in by_lang.values()}
            if len(grade_set) != 1 or 0 in grade_set:
                raise DataError(f"query {qid}: group {gi} copies are not equally relevant")
            ranked.append((-grade_set.pop(), gi, by_lang))
        ranked.sort(key=lambda r: (r[0], r[1]))
        primary = languages[int(rng.integers(len(languages)))]
        minors = [lang for lang in languages if lang != primary]
        n = len(ranked)
        n_primary = min(n, max(1, _round_half_up(primary_fraction * n))) if n else 0
        rest = n - n_primary
        counts = [rest // len(minors) + (1 if i < rest % len(minors) else 0)
                  for i in range(len(minors))] if minors else []
        targets = [primary] * n_primary
        for lang, c in zip(minors, counts):
            targets.extend([lang] * c)
        for (neg_grade, _, by_lang), lang in zip(ranked, targets):
            out.add(qid, by_lang[lang], -neg_grade)
            out.doc_lang[by_lang[lang]] = lang
    return out


def relevant_per_language(qrels, qid):
    counts = {}
    for doc, g in qrels.for_query(qid).items():
        if g >= 1:
            lang = qrels.doc_lang.get(doc)
            counts[lang] = counts.get(lang, 0) + 1
    return counts
