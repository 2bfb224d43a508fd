"""Command-line entry point: ``kdspd <command> ...``.

Every command writes its outputs plus a ``manifest.json`` into the output
directory.  Exit codes: 0 success, 1 invalid input, 2 numeric failure.
"""
import argparse
import hashlib
import json
import os
import sys

from . import __version__
from .corpus import (CORPUS_FILES, CipherSpec, Vocab, gen_cipher_corpus, load_bitext,
                     load_collection, load_groups, load_qrels, load_queries, load_run,
                     load_vocab, tokenize, write_corpus, write_run)
from .errors import ConfigError, KdSpdError, NumericError, ParseError, ValidationError
from .evaluation import (compute_metric, merge_by_score, merge_round_robin,
                         parallel_doc_analysis, paired_t_test)
from .model import SpdConfig, SpdModel, load_checkpoint, save_checkpoint
from .retrieval import index_collection, load_index, save_index, search
from .teacher import SyntheticTeacher, load_teacher_file
from .train import TrainConfig, train

CONFIG_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


# ------------------------------------------------------------- helpers

def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def read_config(path):
    """Load a versioned JSON config; an absent path means all defaults."""
    if path is None:
        return {"schema_version": CONFIG_SCHEMA_VERSION}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = cfg.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r}")
    return cfg


def write_manifest(out_dir, step, config=None, seeds=None, inputs=(), outputs=(),
                   checkpoint=None):
    """Record one step in the directory's single manifest.

    Steps are keyed by their primary output name, so re-running a command
    replaces its own entry and leaves the others untouched.  No timestamps:
    identical runs yield identical manifests.
    """
    path = os.path.join(out_dir, MANIFEST_NAME)
    manifest = {"tool_version": __version__, "steps": {}}
    if os.path.exists(path):
        manifest = read_json(path)
        manifest["tool_version"] = __version__
    key = os.path.basename(outputs[0]) if outputs else step
    manifest["steps"][key] = {
        "command": step,
        "config": config or {},
        "seeds": seeds or {},
        "inputs": {p: _sha256_file(p) for p in inputs if os.path.isfile(p)},
        "outputs": {os.path.basename(p): _sha256_file(p) for p in outputs},
        "checkpoint_sha256": _sha256_file(checkpoint) if checkpoint else None,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir_for(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _teacher(args, dim):
    if args.teacher:
        return load_teacher_file(args.teacher)
    return SyntheticTeacher(dim, seed=args.teacher_seed)


def _teacher_desc(args, teacher):
    if args.teacher:
        return {"kind": "file", "path": args.teacher}
    return {"kind": "synthetic", "dim": teacher.dim, "seed": teacher.seed, "salt": teacher.salt}


# ------------------------------------------------------------ commands

def cmd_gen_corpus(args):
    raw = read_config(args.spec)
    spec = CipherSpec.from_dict(raw.get("corpus", raw))
    corpus = gen_cipher_corpus(spec, args.seed)
    files = write_corpus(corpus, args.out)
    write_manifest(args.out, "gen-corpus", config=spec.to_dict(), seeds={"corpus": args.seed},
                   inputs=[args.spec] if args.spec else [],
                   outputs=[files[k] for k in sorted(files)])
    print(f"wrote {len(corpus.bitext)} bitext pairs, {len(corpus.collection)} documents, "
          f"{len(corpus.queries)} queries to {args.out}")
    return 0


def cmd_train(args):
    raw = read_config(args.config)
    vocab = load_vocab(os.path.join(args.corpus, CORPUS_FILES["vocab"]))
    meta = read_json(os.path.join(args.corpus, CORPUS_FILES["meta"]))
    languages = list(meta["train_languages"])
    model_cfg = {"d": 32, "l": 8, "N": 2, "M": 4, "d_ffn": 64, "max_seq_len": 32,
                 **raw.get("model", {})}
    model_cfg.update(languages=languages, vocab_size=len(vocab),
                     max_languages=vocab.max_languages)
    config = SpdConfig.from_dict(model_cfg)
    tcfg = TrainConfig.from_dict(raw.get("training", {}))
    model_seed = int(raw.get("model_seed", 0))
    teacher = _teacher(args, config.d)
    if teacher.dim != config.d:
        raise ConfigError(f"teacher dim {teacher.dim} != model d {config.d}")
    bitext_path = os.path.join(args.corpus, CORPUS_FILES["bitext"])
    bitext = load_bitext(bitext_path, languages)
    model = SpdModel(config, vocab=vocab.words, seed=model_seed)

    def progress(step, per_epoch, trace):
        epoch = step // per_epoch
        print(f"epoch {epoch}: mean loss {trace.epoch_means(per_epoch)[-1]:.6f}", flush=True)

    try:
        train(model, teacher, bitext, tcfg, out_dir=args.out, vocab=vocab, progress=progress)
    except NumericError as err:
        trace = getattr(err, "trace", None)
        if trace is not None:
            os.makedirs(args.out, exist_ok=True)
            trace.write(os.path.join(args.out, "trace.jsonl"))
        raise
    ckpt = os.path.join(args.out, "final.spd")
    write_manifest(args.out, "train",
                   config={"model": config.to_dict(), "training": tcfg.to_dict(),
                           "teacher": _teacher_desc(args, teacher)},
                   seeds={"model": model_seed, "training": tcfg.seed},
                   inputs=[p for p in (args.config, bitext_path, args.teacher) if p],
                   outputs=[ckpt, os.path.join(args.out, "trace.jsonl")], checkpoint=ckpt)
    print(f"checkpoint {ckpt}")
    return 0


def _model_vocab(model, args):
    if getattr(args, "vocab", None):
        return load_vocab(args.vocab)
    if model.vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; pass --vocab")
    return Vocab(model.vocab, model.config.max_languages)


def cmd_index(args):
    model = load_checkpoint(args.checkpoint)
    vocab = _model_vocab(model, args)
    docs = [(d, lang, tokenize(text, vocab)) for d, lang, text in load_collection(args.collection)]
    index = index_collection(docs, model, stride=args.stride)
    out_dir = _out_dir_for(args.out)
    save_index(args.out, index)
    write_manifest(out_dir, "index", config={"stride": args.stride},
                   inputs=[args.checkpoint, args.collection], outputs=[args.out],
                   checkpoint=args.checkpoint)
    print(f"indexed {len(docs)} documents ({index.n_passages} passages) into {args.out}")
    return 0


def cmd_search(args):
    index = load_index(args.index)
    teacher = _teacher(args, index.dim)
    if teacher.dim != index.dim:
        raise ConfigError(f"teacher dim {teacher.dim} != index dim {index.dim}")
    queries = load_queries(args.queries)
    runs = {qid: search(index, teacher.query(text), args.k, query_id=qid)
            for qid, text in queries}
    out_dir = _out_dir_for(args.out)
    write_run(args.out, runs, tag=args.tag, depth=args.k)
    write_manifest(out_dir, "search",
                   config={"k": args.k, "tag": args.tag, "teacher": _teacher_desc(args, teacher)},
                   seeds={"teacher": None if args.teacher else args.teacher_seed},
                   inputs=[p for p in (args.index, args.queries, args.teacher) if p],
                   outputs=[args.out])
    print(f"searched {len(queries)} queries; run written to {args.out}")
    return 0


def cmd_merge(args):
    loaded = [load_run(p) for p in args.runs]
    qids = sorted(set().union(*loaded))
    merged = {}
    for qid in qids:
        lists = [r[qid] for r in loaded if qid in r]
        if args.strategy == "rr":
            merged[qid] = merge_round_robin(lists, seed=args.seed)
        else:
            merged[qid] = merge_by_score(lists)
    out_dir = _out_dir_for(args.out)
    write_run(args.out, merged, tag=f"merge-{args.strategy}")
    write_manifest(out_dir, "merge", config={"strategy": args.strategy},
                   seeds={"merge": args.seed if args.strategy == "rr" else None},
                   inputs=args.runs, outputs=[args.out])
    print(f"merged {len(args.runs)} runs over {len(qids)} queries into {args.out}")
    return 0


def cmd_eval(args):
    runs = load_run(args.run)
    qrels = load_qrels(args.qrels)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    other = load_run(args.compare) if args.compare else None
    report = {"run": args.run, "metrics": {}}
    for m in metrics:
        per_q, mean = compute_metric(m, runs, qrels)
        entry = {"mean": mean, "queries": len(per_q)}
        line = f"{m:<10} {mean:.4f}"
        if other is not None:
            per_o, mean_o = compute_metric(m, other, qrels)
            shared = sorted(set(per_q) & set(per_o))
            t, p = paired_t_test({q: per_q[q] for q in shared}, {q: per_o[q] for q in shared})
            entry.update(compare_mean=mean_o, t=t, p=p)
            line += f"  vs {mean_o:.4f}  t={t:.4f} p={p:.4g}"
        report["metrics"][m] = entry
        print(line)
    if args.out:
        out_dir = _out_dir_for(args.out)
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out_dir, "eval", config={"metrics": metrics},
                       inputs=[p for p in (args.run, args.qrels, args.compare) if p],
                       outputs=[args.out])
    return 0


def _bar_chart(path_png, series):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, key, label in ((axes[0], "S", "score difference"),
                           (axes[1], "rank_distance", "rank distance")):
        ax.bar(series["labels"], series[key], yerr=series[key + "_std"], capsize=3)
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path_png, dpi=100)
    plt.close(fig)


def cmd_analyze_parallel(args):
    groups = load_groups(args.groups)
    os.makedirs(args.out, exist_ok=True)
    labels, results = [], {}
    for path in args.run:
        label = os.path.splitext(os.path.basename(path))[0]
        if label in results:
            raise ConfigError(f"two runs share the label {label!r}")
        res = parallel_doc_analysis(load_run(path), groups, depth=args.depth)
        labels.append(label)
        results[label] = res
        print(f"{label}: S={res['S']:.6f} rank_distance={res['rank_distance']:.3f} "
              f"(groups {res['groups_covered']}/{res['groups_total']})")
    series = {"labels": labels,
              "S": [results[k]["S"] for k in labels],
              "S_std": [results[k]["score_diff_std"] for k in labels],
              "rank_distance": [results[k]["rank_distance"] for k in labels],
              "rank_distance_std": [results[k]["rank_distance_std"] for k in labels]}
    report_path = os.path.join(args.out, "parallel_analysis.json")
    data_path = os.path.join(args.out, "parallel_bars.json")
    for path, obj in ((report_path, results), (data_path, series)):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    outputs = [report_path, data_path]
    if not args.no_plot:
        png = os.path.join(args.out, "parallel_bars.png")
        _bar_chart(png, series)
    write_manifest(args.out, "analyze-parallel", config={"depth": args.depth},
                   inputs=[*args.run, args.groups], outputs=outputs)
    return 0


def cmd_zeroshot(args):
    model = load_checkpoint(args.checkpoint)
    model.add_zero_shot_language(args.new_lang)
    out_dir = _out_dir_for(args.out)
    save_checkpoint(args.out, model)
    write_manifest(out_dir, "zeroshot", config={"new_lang": args.new_lang},
                   inputs=[args.checkpoint], outputs=[args.out], checkpoint=args.out)
    print(f"added {args.new_lang!r}; languages now {model.config.languages}")
    return 0


def cmd_experiment(args):
    from .experiment import ExperimentConfig, run_experiment

    raw = read_config(args.config)
    cfg = ExperimentConfig.from_dict(raw)
    report = run_experiment(cfg, out_dir=args.out, log=lambda m: print(m, flush=True))
    hashes = report["checkpoint_sha256"]
    ckpt_dir = os.path.join(args.out, "spd")
    write_manifest(args.out, "experiment", config=cfg.to_dict(),
                   seeds={"corpus": cfg.corpus_seed, "teacher": cfg.teacher_seed,
                          "model": cfg.model_seed},
                   inputs=[args.config] if args.config else [],
                   outputs=[os.path.join(args.out, "report.json")],
                   checkpoint=os.path.join(ckpt_dir, "final.spd"))
    print(json.dumps({"S": {k: v["S"] for k, v in report["parallel"].items()},
                      "mrr": report["retrieval"]["mrr"],
                      "zero_shot_mrr": report["zero_shot"].get("mrr"),
                      "spd_sha256": hashes.get("spd")}, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def _add_teacher_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--teacher", help="precomputed embedding file (SPDE)")
    g.add_argument("--synthetic-teacher", action="store_true",
                   help="hashed bag-of-tokens teacher")
    p.add_argument("--teacher-seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="kdspd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"kdspd {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic cipher corpus")
    p.add_argument("--spec", help="JSON corpus spec (defaults used when absent)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="distill the teacher into a student")
    p.add_argument("--config", help="JSON with 'model', 'training', 'model_seed'")
    p.add_argument("--corpus", required=True, help="directory from gen-corpus")
    _add_teacher_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="embed a collection into an index file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--vocab")
    p.add_argument("--stride", type=int, default=90)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="exact top-k search with teacher query vectors")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    _add_teacher_args(p)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--tag", default="kdspd")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("merge", help="merge per-language runs")
    p.add_argument("--strategy", choices=("rr", "score"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="map,ndcg@10,p@10,mrr,r@100")
    p.add_argument("--compare", help="second run for a paired t-test")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-parallel", help="score spread over parallel copies")
    p.add_argument("--run", required=True, action="append")
    p.add_argument("--groups", required=True)
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_parallel)

    p = sub.add_parser("zeroshot", help="add an unseen language to a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-lang", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("experiment", help="full desk experiment with report")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "k", 1) < 1:
        print("error: --k must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except (ValidationError, OSError, UnicodeDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except KdSpdError as err:  # pragma: no cover - every subclass is handled above
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FloatingPointError, OverflowError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
