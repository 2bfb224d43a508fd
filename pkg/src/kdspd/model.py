"""Soft-prompt decoder student encoder and its two variants.

``spd``           token encoder -> language prompt -> N cross-attention
                  decoder layers -> mean over prompt rows
``utspd``         one shared decoder block applied N times, a learned
                  temporal embedding added after each step
``encoder-only``  token encoder -> mean over token rows (KD-Encoder)

Everything is batched: token sequences are right-padded and padded keys are
masked out of attention.
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError, ConflictError, ContractError, FormatError, MissingLanguageError, ShapeError,
)

VARIANTS = ("spd", "utspd", "encoder-only")
PAD_ID = 0
UNK_ID = 1
N_SPECIAL = 2
CHECKPOINT_MAGIC = b"SPD1"
CHECKPOINT_VERSION = 1
_NEG = -1e9


@dataclass
class SpdConfig:
    d: int = 32
    l: int = 8
    N: int = 2
    M: int = 4
    d_ffn: int = 64
    vocab_size: int = 256
    max_seq_len: int = 64
    n_encoder_layers: int = 2
    variant: str = "spd"
    languages: list = field(default_factory=lambda: ["en"])
    max_languages: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.languages = list(self.languages)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d < 1 or self.M < 1 or self.d % self.M:
            raise ConfigError(f"d={self.d} must be divisible by M={self.M}")
        if self.l < 1 or self.N < 1:
            raise ConfigError("l and N must be >= 1")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must leave room for content + language token")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError("duplicate language codes")
        if len(self.languages) > self.max_languages:
            raise ConfigError(f"{len(self.languages)} languages exceed the "
                              f"{self.max_languages} reserved language-token slots")
        if self.vocab_size < N_SPECIAL + self.max_languages:
            raise ConfigError("vocab_size too small for the reserved id range")
        if self.n_encoder_layers < 0 or self.d_ffn < 1:
            raise ConfigError("invalid encoder depth or d_ffn")

    @property
    def d_head(self):
        return self.d // self.M

    def lang_token_id(self, lang):
        try:
            return N_SPECIAL + self.languages.index(lang)
        except ValueError:
            raise MissingLanguageError(lang) from None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ----------------------------------------------------------- prompt bank

class PromptBank:
    """Shared prompt matrix plus one rank-1 (u, v) factor pair per language."""

    def __init__(self, shared, per_language):
        self.shared = shared
        self.per_language = dict(per_language)

    @classmethod
    def from_params(cls, params, languages):
        return cls(params["prompt.shared"],
                   {k: (params[f"prompt.u.{k}"], params[f"prompt.v.{k}"]) for k in languages})

    @property
    def languages(self):
        return list(self.per_language)


def assemble_prompt(bank, lang):
    """Language prompt: shared matrix masked elementwise by ``u vᵀ``."""
    if lang not in bank.per_language:
        raise MissingLanguageError(lang)
    u, v = bank.per_language[lang]
    return T.hadamard(bank.shared, T.outer(u, v))


def synthesize_zero_shot_prompt(bank, new_lang):
    """Extend ``bank`` with a language whose factors average the trained ones."""
    if new_lang in bank.per_language:
        raise ConflictError(f"language {new_lang!r} already in prompt bank")
    if not bank.per_language:
        raise ContractError("cannot synthesize a prompt from an empty bank")
    us = np.stack([u.data for u, _ in bank.per_language.values()])
    vs = np.stack([v.data for _, v in bank.per_language.values()])
    u_new = T.Tensor(us.mean(axis=0).astype(us.dtype), requires_grad=True)
    v_new = T.Tensor(vs.mean(axis=0).astype(vs.dtype), requires_grad=True)
    ext = dict(bank.per_language)
    ext[new_lang] = (u_new, v_new)
    return PromptBank(bank.shared, ext)


# ------------------------------------------------------------ parameters

def _create_block(params, prefix, cfg):
    d, M, dh, f = cfg.d, cfg.M, cfg.d_head, cfg.d_ffn
    for w in ("wq", "wk", "wv"):
        params.create(f"{prefix}.{w}", (M, dh, d), "xavier-uniform")
    params.create(f"{prefix}.wo", (d, d), "xavier-uniform")
    params.create(f"{prefix}.ffn.w1", (d, f), "xavier-uniform")
    params.create(f"{prefix}.ffn.b1", (f,), ("constant", 0.0))
    params.create(f"{prefix}.ffn.w2", (f, d), "xavier-uniform")
    params.create(f"{prefix}.ffn.b2", (d,), ("constant", 0.0))
    for ln in ("ln1", "ln2"):
        params.create(f"{prefix}.{ln}.gain", (d,), ("constant", 1.0))
        params.create(f"{prefix}.{ln}.bias", (d,), ("constant", 0.0))


def add_language_factors(params, cfg, lang):
    params.create(f"prompt.u.{lang}", (cfg.l,), ("normal", 1.0, 0.02))
    params.create(f"prompt.v.{lang}", (cfg.d,), ("normal", 1.0, 0.02))


def init_params(cfg, seed=0):
    params = T.ParamStore(seed)
    params.create("enc.tok", (cfg.vocab_size, cfg.d), "xavier-uniform")
    params.create("enc.pos", (cfg.max_seq_len, cfg.d), "xavier-uniform")
    for i in range(cfg.n_encoder_layers):
        _create_block(params, f"enc.layer{i}", cfg)
    if cfg.variant == "encoder-only":
        return params
    params.create("prompt.shared", (cfg.l, cfg.d), "xavier-uniform")
    for lang in cfg.languages:
        add_language_factors(params, cfg, lang)
    if cfg.variant == "spd":
        for i in range(cfg.N):
            _create_block(params, f"dec.layer{i}", cfg)
    else:
        _create_block(params, "dec.block", cfg)
        for n in range(cfg.N):
            params.create(f"dec.tau{n}", (cfg.l, cfg.d), ("constant", 0.0))
    return params


def block_parameter_count(cfg):
    d, M, dh, f = cfg.d, cfg.M, cfg.d_head, cfg.d_ffn
    return M * 3 * dh * d + d * d + 2 * d * f + f + d + 4 * d


def count_parameters(cfg):
    """Exact parameter counts per component, from the config alone."""
    block = block_parameter_count(cfg)
    counts = {
        "encoder": cfg.vocab_size * cfg.d + cfg.max_seq_len * cfg.d + cfg.n_encoder_layers * block,
    }
    if cfg.variant != "encoder-only":
        counts["prompt_bank"] = cfg.l * cfg.d + len(cfg.languages) * (cfg.l + cfg.d)
    if cfg.variant == "spd":
        counts["decoder"] = cfg.N * block
    elif cfg.variant == "utspd":
        counts["decoder"] = block
        counts["temporal"] = cfg.N * cfg.l * cfg.d
    counts["total"] = sum(counts.values())
    return counts


# ------------------------------------------------------------ layer math

def _heads(x, w, M, dh):
    # x (B, n, d), w (M, dh, d) -> (B, M, n, dh)
    B, n, d = x.shape
    proj = T.matmul(x, T.transpose(T.reshape(w, (M * dh, d))))
    return T.permute(T.reshape(proj, (B, n, M, dh)), (0, 2, 1, 3))


def attention(q_in, kv_in, key_bias, p, prefix, cfg):
    """Multi-head attention of ``q_in`` rows over ``kv_in`` rows, output-projected."""
    M, dh = cfg.M, cfg.d_head
    B, lq, d = q_in.shape
    q = _heads(q_in, p[f"{prefix}.wq"], M, dh)
    k = _heads(kv_in, p[f"{prefix}.wk"], M, dh)
    v = _heads(kv_in, p[f"{prefix}.wv"], M, dh)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    if key_bias is not None:
        scores = T.add(scores, key_bias)
    weights = T.softmax_rows(scores)
    heads = T.matmul(weights, v)
    concat = T.reshape(T.permute(heads, (0, 2, 1, 3)), (B, lq, d))
    return T.matmul(concat, T.transpose(p[f"{prefix}.wo"]))


def feed_forward(x, p, prefix):
    h = T.relu(T.add(T.matmul(x, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
    return T.add(T.matmul(h, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])


def transformer_block(q_in, kv_in, key_bias, p, prefix, cfg):
    eps = cfg.ln_eps
    h = T.layer_norm(T.add(q_in, attention(q_in, kv_in, key_bias, p, prefix, cfg)),
                     p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], eps)
    return T.layer_norm(T.add(h, feed_forward(h, p, prefix)),
                        p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], eps)


def decoder_layer(h_prev, t_rows, p, prefix, cfg, key_bias=None):
    """One cross-attention decoder layer; accepts (l, d) / (n, d) or batched inputs."""
    h_prev, t_rows = T.as_tensor(h_prev), T.as_tensor(t_rows)
    squeeze = h_prev.data.ndim == 2
    if squeeze:
        h_prev = T.reshape(h_prev, (1,) + h_prev.shape)
        t_rows = T.reshape(t_rows, (1,) + t_rows.shape)
    if h_prev.shape[-1] != cfg.d or t_rows.shape[-1] != cfg.d:
        raise ShapeError(f"decoder_layer expects last dim {cfg.d}, "
                         f"got {h_prev.shape} and {t_rows.shape}")
    out = transformer_block(h_prev, t_rows, key_bias, p, prefix, cfg)
    return T.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- encoder

def pad_batch(seqs, langs, cfg):
    """Append each language token and right-pad to the longest sequence."""
    lens = []
    for ids in seqs:
        if len(ids) + 1 > cfg.max_seq_len:
            raise ContractError(f"sequence of {len(ids)} tokens + language token "
                                f"exceeds max_seq_len={cfg.max_seq_len}")
        lens.append(len(ids) + 1)
    n = max(lens)
    ids = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, (s, lang) in enumerate(zip(seqs, langs)):
        ids[i, :len(s)] = s
        ids[i, len(s)] = cfg.lang_token_id(lang)
    return ids, np.asarray(lens, dtype=np.int64)


def encode_batch(p, cfg, seqs, langs):
    """Contextualized token rows (B, n, d) and the additive key mask."""
    ids, lens = pad_batch(seqs, langs, cfg)
    B, n = ids.shape
    dtype = p.dtype
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ContractError("token id outside vocabulary")
    x = T.add(T.take_rows(p["enc.tok"], ids), T.take_rows(p["enc.pos"], np.arange(n)))
    valid = np.arange(n)[None, :] < lens[:, None]
    key_bias = None
    if not valid.all():
        key_bias = T.Tensor(np.where(valid, 0.0, _NEG).astype(dtype)[:, None, None, :])
    for i in range(cfg.n_encoder_layers):
        x = transformer_block(x, x, key_bias, p, f"enc.layer{i}", cfg)
    return x, key_bias, valid


def encode_tokens(token_ids, lang, model):
    """Encoder rows for one sequence: ``len(token_ids) + 1`` rows of width d."""
    x, _, _ = encode_batch(model.params, model.config, [list(token_ids)], [lang])
    return x.data[0]


# ---------------------------------------------------------------- heads

def _batch_prompts(p, cfg, langs):
    bank = PromptBank.from_params(p, cfg.languages)
    present = sorted(set(langs), key=cfg.languages.index)
    for lang in present:
        if lang not in bank.per_language:
            raise MissingLanguageError(lang)
    table = T.stack([assemble_prompt(bank, lang) for lang in present])
    return T.take_rows(table, [present.index(lang) for lang in langs])


def embed_batch(p, cfg, seqs, langs):
    """Document embeddings (B, d) as a differentiable Tensor."""
    for lang in langs:
        if lang not in cfg.languages:
            raise MissingLanguageError(lang)
    t_rows, key_bias, valid = encode_batch(p, cfg, seqs, langs)
    if cfg.variant == "encoder-only":
        w = (valid / valid.sum(axis=1, keepdims=True)).astype(p.dtype)[:, :, None]
        return T.sum_axis(T.mul(t_rows, T.Tensor(w)), 1)
    h = _batch_prompts(p, cfg, langs)
    if cfg.variant == "spd":
        for i in range(cfg.N):
            h = decoder_layer(h, t_rows, p, f"dec.layer{i}", cfg, key_bias)
    else:
        for n in range(cfg.N):
            h = T.add(decoder_layer(h, t_rows, p, "dec.block", cfg, key_bias), p[f"dec.tau{n}"])
    return T.mean_axis(h, 1)


class SpdModel:
    """A config, its parameters and (optionally) the vocabulary it was built for."""

    def __init__(self, config, params=None, vocab=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.vocab = list(vocab) if vocab is not None else None

    def embed(self, seqs, langs):
        return embed_batch(self.params, self.config, seqs, langs).data

    def prompt_bank(self):
        return PromptBank.from_params(self.params, self.config.languages)

    def add_zero_shot_language(self, new_lang):
        """Register ``new_lang`` with averaged prompt factors; returns self."""
        if self.config.variant == "encoder-only":
            raise ConfigError("encoder-only models have no prompt bank")
        if len(self.config.languages) >= self.config.max_languages:
            raise ConfigError("no free language-token slot for a new language")
        bank = synthesize_zero_shot_prompt(self.prompt_bank(), new_lang)
        u, v = bank.per_language[new_lang]
        self.params.add(f"prompt.u.{new_lang}", u)
        self.params.add(f"prompt.v.{new_lang}", v)
        self.config.languages.append(new_lang)
        return self


def _check_variant(model, variant):
    if model.config.variant != variant:
        raise ConfigError(f"model variant is {model.config.variant!r}, expected {variant!r}")


def embed_document(token_ids, lang, model):
    _check_variant(model, "spd")
    return model.embed([list(token_ids)], [lang])[0]


def embed_document_utspd(token_ids, lang, model):
    _check_variant(model, "utspd")
    return model.embed([list(token_ids)], [lang])[0]


def embed_encoder_only(token_ids, lang, model):
    _check_variant(model, "encoder-only")
    return model.embed([list(token_ids)], [lang])[0]


# ------------------------------------------------------------- checkpoints

def checkpoint_bytes(model):
    header = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
              "vocab": model.vocab}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)))
        out.append(key)
        out.append(struct.pack("<I", t.data.ndim))
        out.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, model):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return checkpoint_from_bytes(buf, source=path)


def checkpoint_from_bytes(buf, source="<bytes>"):
    def fail(msg):
        raise FormatError(f"{source}: {msg}")

    if buf[:4] != CHECKPOINT_MAGIC:
        fail("bad magic (expected SPD1)")
    pos = 4
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        header = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = T.ParamStore(0)
        for _ in range(count):
            (kl,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + kl].decode("utf-8")
            pos += kl
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                fail(f"truncated tensor {name!r}")
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params.add(name, T.Tensor(data.astype(np.float32)))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        fail(f"corrupt checkpoint ({exc})")
    if pos != len(buf):
        fail("trailing bytes after last tensor")
    if header.get("format_version") != CHECKPOINT_VERSION:
        fail(f"unsupported checkpoint version {header.get('format_version')!r}")
    cfg = SpdConfig.from_dict(header["config"])
    expected = init_params(cfg, 0)
    if expected.names() != params.names():
        fail("parameter names do not match the stored config")
    for name, t in expected.items():
        if t.shape != params[name].shape:
            fail(f"shape mismatch for {name!r}")
    return SpdModel(cfg, params, header.get("vocab"))
