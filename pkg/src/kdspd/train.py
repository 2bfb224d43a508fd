"""Distillation of a frozen teacher into the multilingual student.

Each step draws ``B`` bitext pairs per language (languages in config
order), embeds the source sides with the student and regresses them onto
the teacher vectors of the English sides with a mean squared L2 loss.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Vocab, tokenize
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .model import embed_batch, save_checkpoint


@dataclass
class TrainConfig:
    B: int = 4
    learning_rate: float = 2e-5
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_seq_len: int = 180
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.B < 1 or self.learning_rate <= 0 or self.epochs < 1:
            raise ConfigError("need B >= 1, learning_rate > 0, epochs >= 1")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    def append(self, step, loss, per_lang):
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        if self.records and step <= self.records[-1]["step"]:
            raise ContractError("trace steps must increase")
        self.records.append({"step": int(step), "loss": float(loss),
                             "per_lang": {k: float(v) for k, v in per_lang.items()}})

    def losses(self):
        return np.array([r["loss"] for r in self.records])

    def epoch_means(self, steps_per_epoch):
        loss = self.losses()
        n = len(loss) // steps_per_epoch
        return [float(loss[i * steps_per_epoch:(i + 1) * steps_per_epoch].mean())
                for i in range(n)]

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())


# ------------------------------------------------------------- batching

class LanguageStream:
    """Seeded reshuffle-per-epoch view over one language's examples.

    Positions are global, so item ``p`` is a pure function of
    ``(seed, lang, p)``: no hidden iterator state.
    """

    def __init__(self, lang, examples, seed):
        if not examples:
            raise DataError(f"no training examples for language {lang!r}")
        self.lang = lang
        self.examples = examples
        self.seed = seed
        self._perms = {}

    def __len__(self):
        return len(self.examples)

    def _perm(self, epoch):
        if epoch not in self._perms:
            ss = np.random.SeedSequence([self.seed, epoch, *self.lang.encode("utf-8")])
            self._perms = {epoch: np.random.default_rng(ss).permutation(len(self.examples))}
        return self._perms[epoch]

    def item(self, pos):
        epoch, i = divmod(pos, len(self.examples))
        return self.examples[self._perm(epoch)[i]]

    def epoch_of(self, pos):
        return pos // len(self.examples)


def build_batch(streams, B, step):
    """``B`` examples per language for ``step``, languages in stream order."""
    batch = []
    for stream in streams:
        if len(stream) == 0:
            raise DataError(f"empty stream for {stream.lang!r}")
        for i in range(B):
            lang, ids, target = stream.item(step * B + i)
            batch.append((lang, ids, target))
    return batch


# --------------------------------------------------------------- loss

def distill_loss(student, teacher):
    """Mean over pairs of the squared L2 distance; teacher side is constant."""
    student = T.as_tensor(student)
    teacher = np.asarray(teacher.data if isinstance(teacher, T.Tensor) else teacher)
    if student.shape != teacher.shape or student.data.ndim != 2:
        raise ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    diff = T.sub(student, T.Tensor(teacher.astype(student.dtype)))
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / student.shape[0])


# --------------------------------------------------------------- adam

class Adam:
    """Adam over one flat buffer; parameter arrays become views into it."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = params.names()
        sizes = [params[n].data.size for n in self.names]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        dtype = params.dtype
        self.flat = np.empty(int(self.offsets[-1]), dtype=dtype)
        for n, s, e in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            t = params[n]
            self.flat[s:e] = t.data.reshape(-1)
            t.data = self.flat[s:e].reshape(t.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.step_count = 0
        self._g = np.zeros_like(self.flat)

    def gather_grads(self):
        g = self._g
        for n, s, e in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            grad = self.params[n].grad
            if grad is None:
                g[s:e] = 0
            else:
                g[s:e] = grad.reshape(-1)
        return g

    def step(self):
        g = self.gather_grads()
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; step aborted")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * (g * g)
        lr_t = self.lr * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
        eps_t = self.eps * math.sqrt(1 - b2 ** t)
        self.flat -= (lr_t * self.m / (np.sqrt(self.v) + eps_t)).astype(self.flat.dtype)


def adam_step(params, state, hyper=None):
    """Apply one update; ``state`` is an :class:`Adam` built for ``params``."""
    if hyper:
        for k, v in hyper.items():
            setattr(state, k, v)
    state.step()
    return params, state


# -------------------------------------------------------------- training

def prepare_examples(pairs, teacher, vocab, languages, max_len):
    """Tokenize and truncate sources; teacher vectors computed once per English text."""
    cache = {}
    per_lang = {lang: [] for lang in languages}
    for p in pairs:
        if p.lang not in per_lang:
            raise ConfigError(f"bitext language {p.lang!r} not configured in the model")
        ids = tokenize(p.source, vocab)[:max_len - 1]
        vec = cache.get(p.english)
        if vec is None:
            vec = cache[p.english] = np.asarray(teacher.embed(p.english), dtype=np.float32)
        per_lang[p.lang].append((p.lang, ids, vec))
    return per_lang, cache


def train(model, teacher, bitext, config, out_dir=None, vocab=None, progress=None):
    """Run distillation; returns ``(model, trace)``.

    ``model.params`` is updated in place.  Checkpoints go to ``out_dir``
    every ``checkpoint_every`` steps (if > 0) and at the end.
    """
    cfg = model.config
    vocab = vocab if vocab is not None else model.vocab
    if vocab is None:
        raise ConfigError("a vocabulary is needed to tokenize bitext")
    if not isinstance(vocab, Vocab):
        vocab = Vocab(vocab, cfg.max_languages)
    if not bitext:
        raise DataError("empty bitext corpus: nothing to train on")
    langs_present = {p.lang for p in bitext}
    missing = sorted(langs_present - set(cfg.languages))
    if missing:
        raise ConfigError(f"bitext languages {missing} not configured in the model")
    languages = [lang for lang in cfg.languages if lang in langs_present]
    max_len = min(config.max_seq_len, cfg.max_seq_len)
    per_lang, _ = prepare_examples(bitext, teacher, vocab, languages, max_len)
    streams = [LanguageStream(lang, per_lang[lang], config.seed) for lang in languages]
    steps_per_epoch = math.ceil(max(len(s) for s in streams) / config.B)
    total = steps_per_epoch * config.epochs

    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    trace = LossTrace()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    B = config.B
    for step in range(total):
        batch = build_batch(streams, B, step)
        seqs = [b[1] for b in batch]
        langs = [b[0] for b in batch]
        target = np.stack([b[2] for b in batch])
        model.params.zero_grad()
        emb = embed_batch(model.params, cfg, seqs, langs)
        loss = distill_loss(emb, target)
        value = float(loss.data)
        if not math.isfinite(value):
            err = NumericError(f"non-finite loss at step {step}")
            err.trace = trace
            raise err
        sq = ((emb.data - target) ** 2).sum(axis=1)
        per = {lang: float(sq[i * B:(i + 1) * B].mean()) for i, lang in enumerate(languages)}
        trace.append(step, value, per)
        T.backward(loss)
        try:
            opt.step()
        except NumericError as err:
            err.trace = trace
            raise
        if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"step{step + 1:07d}.spd"), model)
        if progress is not None and (step + 1) % steps_per_epoch == 0:
            progress(step + 1, steps_per_epoch, trace)
    model.params.zero_grad()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.spd"), model)
        trace.write(os.path.join(out_dir, "trace.jsonl"))
    trace.steps_per_epoch = steps_per_epoch
    return model, trace


def embedding_agreement(model, teacher, pairs, vocab, chunk=64):
    """Mean cosine and mean squared distance between student and teacher on ``pairs``."""
    cfg = model.config
    seqs = [tokenize(p.source, vocab)[:cfg.max_seq_len - 1] for p in pairs]
    langs = [p.lang for p in pairs]
    student = np.concatenate([model.embed(seqs[i:i + chunk], langs[i:i + chunk])
                              for i in range(0, len(seqs), chunk)]).astype(np.float64)
    target = np.stack([teacher.embed(p.english) for p in pairs])
    cos = (student * target).sum(1) / (np.linalg.norm(student, axis=1)
                                       * np.linalg.norm(target, axis=1))
    return {"cosine": float(cos.mean()), "mse": float(((student - target) ** 2).sum(1).mean()),
            "per_lang_cosine": {lang: float(cos[np.array(langs) == lang].mean())
                                for lang in dict.fromkeys(langs)}}
