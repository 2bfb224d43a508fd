"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-9 and 11 share one full desk experiment run through the CLI
(about five minutes on one core); criterion 11 repeats it in a subprocess
with a different SPD_THREADS and compares every output byte for byte.
"""
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from kdspd import tensor as T
from kdspd.cli import main
from kdspd.corpus import load_queries, load_run
from kdspd.evaluation import (Qrels, biased_relevance_split, compute_metric,
                              parse_metric, relevant_per_language)
from kdspd.experiment import ExperimentConfig
from kdspd.model import (PromptBank, SpdConfig, SpdModel, assemble_prompt, count_parameters,
                         decoder_layer, embed_batch, embed_document)
from kdspd.retrieval import RankedList, index_from_vectors, search

from oracles import metric_mean_reference, random_instance, search_reference

FIX = os.path.join(os.path.dirname(__file__), "fixtures")


# ---------------------------------------------------------------- 1

def _gc_model(seed):
    cfg = SpdConfig(d=8, l=3, N=2, M=2, d_ffn=12, vocab_size=24, max_seq_len=10,
                    n_encoder_layers=1, languages=["en", "c1"])
    m = SpdModel(cfg, seed=seed)
    m.params = m.params.astype(np.float64)
    rng = np.random.default_rng(seed)
    for _, t in m.params.items():  # break init symmetries (zero biases, unit gains)
        t.data += 0.1 * rng.standard_normal(t.shape)
    return m, rng


PROBE = 1e-5  # near eps_mach ** (1/3): balances truncation against cancellation


def test_criterion_01_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = {"prompt->decoder->pool": 0.0, "embed_document": 0.0}
    for seed in range(20):
        m, rng = _gc_model(seed)
        cfg = m.config
        lang = ["en", "c1"][seed % 2]
        # (a) prompt assembly, one decoder layer, mean pool; encoder rows as a leaf
        sub = T.ParamStore(seed)
        for name in ("prompt.shared", f"prompt.u.{lang}", f"prompt.v.{lang}"):
            sub.add(name, m.params[name])
        for name, t in m.params.items():
            if name.startswith("dec.layer0."):
                sub.add(name, t)
        sub.add("rows", T.Tensor(rng.standard_normal((6, cfg.d))))
        w = rng.standard_normal(cfg.d)

        def f_a(ps):
            bank = PromptBank(ps["prompt.shared"],
                              {lang: (ps[f"prompt.u.{lang}"], ps[f"prompt.v.{lang}"])})
            h = decoder_layer(assemble_prompt(bank, lang), ps["rows"], ps, "dec.layer0", cfg)
            return T.sum_all(T.mul(T.mean_axis(h, 0), T.Tensor(w)))

        worst["prompt->decoder->pool"] = max(worst["prompt->decoder->pool"],
                                             T.grad_check(f_a, sub, probe_eps=PROBE, seed=seed))
        # (b) full document embedding, every parameter
        ids = rng.integers(10, 24, size=int(rng.integers(2, 8))).tolist()

        def f_b(ps):
            return T.sum_all(T.mul(_embed_tensor(m, ps, ids, lang), T.Tensor(w[None, :])))

        worst["embed_document"] = max(worst["embed_document"],
                                      T.grad_check(f_b, m.params, probe_eps=PROBE,
                                                   max_coords=150, seed=seed))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    assert criterion(1, ok, f"max rel err {max(worst.values()):.2e} "
                            f"({', '.join(f'{k} {v:.1e}' for k, v in worst.items())}), "
                            f"20 seeds, {elapsed:.1f}s")


def _embed_tensor(model, ps, ids, lang):
    return embed_batch(ps, model.config, [ids], [lang])


def test_embed_document_agrees_with_tensor_path():
    m, _ = _gc_model(0)
    np.testing.assert_array_equal(embed_document([11, 12], "c1", m),
                                  _embed_tensor(m, m.params, [11, 12], "c1").data[0])


# ---------------------------------------------------------------- 2

def test_criterion_02_prompt_identity(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        l, d = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        shared = rng.standard_normal((l, d)).astype(np.float32)
        u = (1 + 0.02 * rng.standard_normal(l)).astype(np.float32)
        v = (1 + 0.02 * rng.standard_normal(d)).astype(np.float32)
        got = assemble_prompt(PromptBank(T.Tensor(shared), {"x": (T.Tensor(u), T.Tensor(v))}),
                              "x").data
        for i in range(l):
            for j in range(d):
                if got[i, j] != shared[i, j] * (u[i] * v[j]):
                    mismatches += 1
    assert criterion(2, mismatches == 0, f"1000 random banks, {mismatches} mismatching elements "
                                         "(float32, bit-exact)")


# ---------------------------------------------------------------- 3

def test_criterion_03_metric_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    metrics = ["map", "mrr", "ndcg@10", "ndcg", "p@5", "r@5", "r@100", "p@10"]
    worst = 0.0
    for i in range(1000):
        grades, runs = random_instance(rng)
        metric = metrics[i % len(metrics)]
        kind, cut = parse_metric(metric)
        ranked = {q: RankedList(q, [(d, 1.0 / (r + 1), None) for r, d in enumerate(docs)])
                  for q, docs in runs.items()}
        _, got = compute_metric(metric, ranked, Qrels(dict(grades)))
        worst = max(worst, abs(got - metric_mean_reference(kind, cut, runs, grades)))

    def one(metric, rels, ranking):
        run = RankedList("q", [(d, 1.0 / (r + 1), None) for r, d in enumerate(ranking)])
        return compute_metric(metric, {"q": run},
                              Qrels({("q", d): g for d, g in rels.items()}))[1]

    ap = one("map", {"d1": 1, "d3": 1}, ["d1", "d2", "d3"])
    ndcg = one("ndcg@3", {"a": 3, "b": 0, "c": 1}, ["a", "b", "c"])
    rr = one("mrr", {"d4": 1}, ["d1", "d2", "d3", "d4"])
    hand = (round(ap, 4) == 0.8333 and round(ndcg, 5) == 0.98284 and rr == 0.25)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and hand and elapsed < 60
    assert criterion(3, ok, f"1000 instances max |diff| {worst:.1e}; AP {ap:.4f}, "
                            f"nDCG {ndcg:.5f}, RR {rr}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 4

def test_criterion_04_retrieval_oracle(criterion):
    rng = np.random.default_rng(4)
    bad = ties_seen = 0
    for i in range(200):
        n, d = int(rng.integers(1, 1001)), int(rng.integers(1, 65))
        if i % 2:  # coarse integer grid: many exact score ties
            vecs = rng.integers(-1, 2, size=(n, d)).astype(np.float32)
            q = rng.integers(-1, 2, size=d).astype(np.float64)
        else:
            vecs = rng.standard_normal((n, d)).astype(np.float32)
            q = rng.standard_normal(d)
        ids = [f"d{j:04d}" for j in rng.permutation(n)]
        k = int(rng.integers(1, n + 20))
        got = search(index_from_vectors(ids, ["en"] * n, vecs), q, k)
        ref = search_reference(ids, vecs, q, k)
        ties_seen += len(ref) - len({s for _, s in ref})
        if [(e[0], e[1]) for e in got.entries] != ref:
            bad += 1
    ok = bad == 0 and ties_seen > 0
    assert criterion(4, ok, f"200 random indexes, {bad} mismatches vs full sort, "
                            f"{ties_seen} tied scores exercised")


# ------------------------------------------------------------- 5 to 9, 11

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    env_before = os.environ.get("SPD_THREADS")
    os.environ["SPD_THREADS"] = "3"
    start = time.perf_counter()
    try:
        assert main(["experiment", "--out", str(out / "a")]) == 0
    finally:
        if env_before is None:
            os.environ.pop("SPD_THREADS", None)
        else:
            os.environ["SPD_THREADS"] = env_before
    elapsed = time.perf_counter() - start
    with open(out / "a" / "report.json", encoding="utf-8") as fh:
        report = json.load(fh)
    return {"dir": out, "report": report, "elapsed": elapsed}


def test_criterion_05_distillation(experiment, criterion):
    r = experiment["report"]
    tr = r["training"]["spd"]
    ratio = tr["final_loss"] / tr["initial_loss"]
    cos = r["distillation"]["spd"]["cosine"]
    ok = ratio < 0.10 and cos > 0.95
    assert criterion(5, ok, f"loss {tr['initial_loss']:.3f} -> {tr['final_loss']:.4f} "
                            f"(ratio {ratio:.4f}), held-out cosine {cos:.4f}, "
                            f"experiment {experiment['elapsed']:.0f}s")


def test_criterion_06_parallel_score_spread(experiment, criterion):
    s = {k: v["S"] for k, v in experiment["report"]["parallel"].items()}
    spd, enc, untrained = s["spd"], s["encoder-only"], s["spd-untrained"]
    ok = spd < enc < untrained and spd < 0.2 * untrained
    assert criterion(6, ok, f"S spd {spd:.5f} < encoder-only {enc:.5f} < untrained "
                            f"{untrained:.5f}; spd/untrained {spd / untrained:.3f}")


def test_criterion_07_retrieval_transfer(experiment, criterion):
    ret = experiment["report"]["retrieval"]
    student, teacher = ret["mrr"]["spd"], ret["teacher_english_mrr"]
    n_queries = len(load_queries(experiment["dir"] / "a" / "corpus" / "queries.tsv"))
    ok = student >= 0.90 * teacher and n_queries == 100
    assert criterion(7, ok, f"student multilingual MRR {student:.4f} vs teacher English "
                            f"{teacher:.4f} (ratio {student / teacher:.3f}, {n_queries} queries)")


def test_criterion_08_zero_shot(experiment, criterion):
    zs = experiment["report"]["zero_shot"]
    ratio = zs["mrr"] / zs["random_mrr"]
    ok = ratio >= 5
    assert criterion(8, ok, f"zero-shot {zs['languages']} MRR {zs['mrr']:.4f} vs random "
                            f"{zs['random_mrr']:.4f} ({ratio:.2f}x)")


def test_criterion_09_shared_block_variant(experiment, criterion):
    r = experiment["report"]
    shape = dict(d=32, l=30, M=4, d_ffn=64, vocab_size=615, max_seq_len=180,
                 n_encoder_layers=2, languages=["en", "c1", "c2", "c3"])
    spd6 = count_parameters(SpdConfig(**shape, N=6, variant="spd"))["total"]
    ut6 = count_parameters(SpdConfig(**shape, N=6, variant="utspd"))["total"]
    ut12 = r["parameters"]["full_shape"]["utspd_N12"]["total"]
    tr = r["training"]["utspd"]
    ratio = tr["final_loss"] / tr["initial_loss"]
    epochs_ok = r["config"]["utspd_epochs"] <= 2 * r["config"]["training"]["epochs"]
    ok = ut6 < spd6 and ut12 < r["parameters"]["full_shape"]["spd_N6"]["total"] \
        and ratio < 0.10 and epochs_ok
    assert criterion(9, ok, f"params utspd N6 {ut6} / N12 {ut12} < spd N6 {spd6}; "
                            f"utspd loss ratio {ratio:.4f} in {tr['epochs']} epochs")


def _tree_digest(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            if name.endswith(".png"):
                continue
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_criterion_11_determinism(experiment, criterion):
    out = experiment["dir"]
    env = dict(os.environ, SPD_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "kdspd.cli", "experiment", "--out",
                           str(out / "b")], env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    a, b = _tree_digest(out / "a"), _tree_digest(out / "b")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    kinds = {"checkpoints": sum(k.endswith(".spd") for k in a),
             "runs": sum(k.startswith("run_") for k in a),
             "reports": sum(k.endswith("report.json") for k in a)}
    ok = not differing and all(kinds.values())
    assert criterion(11, ok, f"{len(a)} files byte-identical across SPD_THREADS=3 and 1 "
                             f"({kinds}); differing: {differing[:3]}")


# ---------------------------------------------------------------- 10

def test_criterion_10_merges_and_biased_split(tmp_path, criterion):
    runs = [os.path.join(FIX, f"run_{lang}.txt") for lang in ("en", "c1", "c2")]
    same = {}
    for strategy, extra, golden in (("rr", ["--seed", "7"], "golden_rr_seed7.txt"),
                                    ("score", [], "golden_score.txt")):
        out = tmp_path / f"{strategy}.txt"
        assert main(["merge", "--strategy", strategy, *extra, "--out", str(out), *runs]) == 0
        with open(os.path.join(FIX, golden), "rb") as fh:
            same[strategy] = out.read_bytes() == fh.read()
    assert len(load_run(os.path.join(FIX, "golden_rr_seed7.txt"))) == 2
    langs = ["en", "c1", "c2", "c3"]
    qrels, groups = Qrels(), {"q": []}
    for g in range(10):
        for lang in langs:
            qrels.add("q", f"{lang}-{g}", 1)
            qrels.doc_lang[f"{lang}-{g}"] = lang
        groups["q"].append([(f"{lang}-{g}", lang) for lang in langs])
    counts = relevant_per_language(biased_relevance_split(qrels, groups, langs, seed=1), "q")
    split = sorted(counts.values(), reverse=True)
    ok = all(same.values()) and split == [6, 2, 1, 1]
    assert criterion(10, ok, f"golden rr {same['rr']}, golden min-max {same['score']}; "
                             f"biased split of 10 over K=4 -> {split}")


def test_experiment_config_defaults_match_criteria():
    cfg = ExperimentConfig()
    assert {k: cfg.model[k] for k in ("d", "l", "N", "M")} == {"d": 32, "l": 8, "N": 2, "M": 4}
