"""End-to-end desk experiment on a cipher corpus.

Trains the SPD student, the encoder-only baseline and the shared-block
variant against one synthetic teacher, then measures distillation quality,
cross-language score spread, retrieval transfer and zero-shot transfer.
Everything written to ``out_dir`` is a pure function of the config.
"""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .corpus import CipherSpec, gen_cipher_corpus, tokenize, write_corpus, write_run
from .evaluation import compute_metric, parallel_doc_analysis, random_ranking_mrr
from .model import SpdConfig, SpdModel, checkpoint_bytes, count_parameters
from .retrieval import index_collection, index_from_vectors, search
from .teacher import SyntheticTeacher
from .train import TrainConfig, embedding_agreement, train


@dataclass
class ExperimentConfig:
    corpus: dict = field(default_factory=dict)
    corpus_seed: int = 0
    model: dict = field(default_factory=lambda: {"d": 32, "l": 8, "N": 2, "M": 4, "d_ffn": 64,
                                                 "max_seq_len": 32, "n_encoder_layers": 2})
    training: dict = field(default_factory=lambda: {"B": 4, "learning_rate": 3e-3,
                                                    "epochs": 30, "max_seq_len": 32})
    utspd_steps: int = 4
    utspd_epochs: int = 30
    teacher_seed: int = 0
    model_seed: int = 0
    k: int = 1000
    variants: tuple = ("spd", "encoder-only", "utspd")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        out = asdict(self)
        out["variants"] = list(self.variants)
        return out


def _docs(collection, vocab):
    return [(doc_id, lang, tokenize(text, vocab)) for doc_id, lang, text in collection]


def _search_all(index, queries, teacher, k):
    return {qid: search(index, teacher.query(text), k, query_id=qid) for qid, text in queries}


def run_experiment(cfg, out_dir=None, log=print):
    """Run everything; returns the report dict (also written to ``out_dir``)."""
    spec = CipherSpec.from_dict(cfg.corpus)
    corpus = gen_cipher_corpus(spec, cfg.corpus_seed)
    vocab = corpus.vocab
    teacher = SyntheticTeacher(cfg.model["d"], seed=cfg.teacher_seed)
    tcfg = TrainConfig.from_dict({**cfg.training, "seed": cfg.training.get("seed", 0)})
    languages = corpus.train_languages
    docs = _docs(corpus.collection, vocab)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_corpus(corpus, os.path.join(out_dir, "corpus"))

    def build(variant, n_steps=None):
        mcfg = SpdConfig(**{**cfg.model, "variant": variant, "languages": list(languages),
                            "vocab_size": len(vocab), "max_languages": spec.max_languages,
                            **({"N": n_steps} if n_steps else {})})
        return SpdModel(mcfg, vocab=vocab.words, seed=cfg.model_seed)

    report = {"tool_version": __version__, "config": cfg.to_dict()}
    models, traces, hashes = {}, {}, {}

    untrained = build("spd")
    models["spd-untrained"] = untrained
    for variant in cfg.variants:
        n_steps = cfg.utspd_steps if variant == "utspd" else None
        model = build(variant, n_steps)
        t = tcfg if variant != "utspd" else TrainConfig.from_dict(
            {**tcfg.to_dict(), "epochs": cfg.utspd_epochs})
        log(f"training {variant} for {t.epochs} epochs")
        sub = os.path.join(out_dir, variant) if out_dir else None
        initial = embedding_agreement(model, teacher, corpus.bitext, vocab)["mse"]
        _, trace = train(model, teacher, corpus.bitext, t, out_dir=sub, vocab=vocab)
        final = embedding_agreement(model, teacher, corpus.bitext, vocab)["mse"]
        models[variant] = model
        traces[variant] = {"initial_loss": initial, "final_loss": final,
                           "first_epoch_loss": trace.epoch_means(trace.steps_per_epoch)[0],
                           "last_epoch_loss": trace.epoch_means(trace.steps_per_epoch)[-1],
                           "epochs": t.epochs, "steps_per_epoch": trace.steps_per_epoch}

    for name, model in models.items():
        hashes[name] = hashlib.sha256(checkpoint_bytes(model)).hexdigest()

    # distillation quality
    distill = {}
    for name in ["spd-untrained", *cfg.variants]:
        entry = embedding_agreement(models[name], teacher, corpus.heldout, vocab)
        distill[name] = entry
    report["distillation"] = distill

    # retrieval runs on the multilingual collection
    runs, s_values, mrr = {}, {}, {}
    for name, model in models.items():
        index = index_collection(docs, model)
        runs[name] = _search_all(index, corpus.queries, teacher, cfg.k)
        s_values[name] = parallel_doc_analysis(runs[name], corpus.groups)
        mrr[name] = compute_metric("mrr", runs[name], corpus.qrels)[1]
        if out_dir:
            write_run(os.path.join(out_dir, f"run_{name}.txt"), runs[name], tag=name)

    en_docs = [(d, lang, text) for d, lang, text in corpus.collection if lang == "en"]
    en_index = index_from_vectors([d for d, _, _ in en_docs], ["en"] * len(en_docs),
                                  np.stack([teacher.embed(text) for _, _, text in en_docs]))
    teacher_runs = _search_all(en_index, corpus.queries, teacher, cfg.k)
    en_qrels = copy.deepcopy(corpus.qrels)
    en_qrels.grades = {k: g for k, g in en_qrels.grades.items() if k[1].startswith("en-")}
    teacher_mrr = compute_metric("mrr", teacher_runs, en_qrels)[1]
    if out_dir:
        write_run(os.path.join(out_dir, "run_teacher_en.txt"), teacher_runs, tag="teacher")

    report["parallel"] = {name: {k: v for k, v in s.items() if k != "per_query"}
                          for name, s in s_values.items()}
    report["retrieval"] = {"mrr": mrr, "teacher_english_mrr": teacher_mrr}

    # zero-shot: a cipher language never seen in training
    zs = {}
    if "spd" in models and corpus.zero_shot_languages:
        zs_model = copy.deepcopy(models["spd"])
        for lang in corpus.zero_shot_languages:
            zs_model.add_zero_shot_language(lang)
        zs_index = index_collection(_docs(corpus.collection_zs, vocab), zs_model)
        zs_runs = _search_all(zs_index, corpus.queries, teacher, cfg.k)
        n_docs = len(corpus.collection_zs)
        n_rel = spec.docs_per_topic * len(corpus.zero_shot_languages)
        zs = {"languages": corpus.zero_shot_languages,
              "mrr": compute_metric("mrr", zs_runs, corpus.qrels_zs)[1],
              "random_mrr": random_ranking_mrr(n_docs, n_rel),
              "collection_size": n_docs, "relevant_per_query": n_rel}
        hashes["spd-zero-shot"] = hashlib.sha256(checkpoint_bytes(zs_model)).hexdigest()
        if out_dir:
            write_run(os.path.join(out_dir, "run_zero_shot.txt"), zs_runs, tag="zero-shot")
    report["zero_shot"] = zs

    # parameter counts at the full-size decoder shape (l=30, seq 180) with d=32
    full = dict(d=32, l=30, M=4, d_ffn=64, vocab_size=len(vocab), max_seq_len=180,
                n_encoder_layers=2, languages=list(languages), max_languages=spec.max_languages)
    report["parameters"] = {
        "desk": {name: count_parameters(m.config) for name, m in models.items()
                 if name != "spd-untrained"},
        "full_shape": {"spd_N6": count_parameters(SpdConfig(**full, N=6, variant="spd")),
                       "utspd_N12": count_parameters(SpdConfig(**full, N=12, variant="utspd")),
                       "encoder_only": count_parameters(SpdConfig(**full, variant="encoder-only"))},
    }
    report["training"] = traces
    report["checkpoint_sha256"] = hashes
    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report_json(report))
    report["_models"] = models
    return report


def report_json(report):
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"
