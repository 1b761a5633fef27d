"""Sequence-to-sequence models for speech and text summarization.

Two model families share one decoder definition:

* ``SpeechToTextModel``: convolutional subsampling + conformer encoder
  over frame features, transformer decoder over tokens. Used for
  transcription pre-training and speech summarization.
* ``TextToTextModel``: transformer encoder over tokens, the same decoder.
  Used for denoising language-model pre-training and text summarization.

Decoder parameters carry identical names and shapes in both families so a
decoder trained in one can be moved into the other verbatim. Encoder
output width must equal decoder width for the cross-attention to line up;
the defaults keep them equal.

All parameters live in a flat ``name -> Tensor`` dict built from an
explicit (name, shape, init) table, which makes creation order, shapes
and initialization deterministic and easy to audit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """A model configuration violates its invariants."""


class VocabError(ValueError):
    """Token lookup failed or a vocabulary is malformed."""


@dataclass
class ModelConfig:
    """Hyperparameters for both model families.

    The defaults are the desk-scale setup used throughout the tests; see
    ``full_scale_reference`` for the large configuration this mirrors.
    """

    vocab_size: int
    feature_dim: int = 16
    subsample_rate: int = 4
    subsample_layers: int = 2
    enc_layers: int = 2
    enc_dim: int = 48
    enc_heads: int = 4
    enc_ff: int = 96
    conv_kernel: int = 7
    rel_clip: int = 64
    dec_layers: int = 2
    dec_dim: int = 48
    dec_heads: int = 4
    dec_ff: int = 96
    text_enc_layers: int = 2
    max_decode_len: int = 64

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four specials plus content")
        rate = self.subsample_rate
        if rate < 1 or rate & (rate - 1):
            raise ConfigError(f"subsample_rate must be a power of two, got {rate}")
        if self.subsample_layers < max(rate.bit_length() - 1, 1):
            raise ConfigError("not enough subsample_layers for the requested rate")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("model widths must be divisible by their head counts")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.rel_clip < 1:
            raise ConfigError("rel_clip must be at least 1")
        if self.max_decode_len < 2:
            raise ConfigError("max_decode_len must allow at least one token plus the end token")
        for name in ("enc_layers", "dec_layers", "text_enc_layers", "enc_ff", "dec_ff", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


def full_scale_reference() -> ModelConfig:
    """Configuration of the full-scale experiment this package mirrors
    at desk scale: 43-dim filterbank+pitch features subsampled 4x by a
    4-layer CNN, a 12-layer 768-dim conformer encoder, and a 6-layer
    768-dim transformer decoder over a 50,265-entry subword vocabulary.
    Documentation only; far too large to train here."""
    return ModelConfig(
        vocab_size=50_265,
        feature_dim=43,
        subsample_rate=4,
        subsample_layers=4,
        enc_layers=12,
        enc_dim=768,
        enc_heads=8,
        enc_ff=3072,
        conv_kernel=31,
        rel_clip=160,
        dec_layers=6,
        dec_dim=768,
        dec_heads=8,
        dec_ff=3072,
        text_enc_layers=6,
        max_decode_len=128,
    ).validate()


class Vocabulary:
    """Token/id bijection with four reserved specials.

    Ids 0..3 are pad, sequence-start, sequence-end and mask; content
    words follow in the order given. The content hash identifies the
    exact id assignment so checkpoints can refuse mismatched vocabularies.
    """

    PAD, SOS, EOS, MASK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<s>", "</s>", "<mask>")

    def __init__(self, words: list[str]):
        tokens = list(self.SPECIALS) + list(words)
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for w in words:
            if not w or any(c.isspace() for c in w):
                raise VocabError(f"content token {w!r} is empty or contains whitespace")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def words(self) -> list[str]:
        return self._tokens[len(self.SPECIALS):]

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabError(f"token id {idx} out of range for vocabulary of {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.token_of(i) for i in ids]

    def content_hash(self) -> str:
        blob = "\n".join(f"{i}\t{tok}" for i, tok in enumerate(self._tokens))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ------------------------------------------------------- parameter table


def _attn_spec(prefix: str, d_model: int, d_kv: int) -> list[tuple[str, tuple, str]]:
    return [
        (f"{prefix}.norm.gain", (d_model,), "ones"),
        (f"{prefix}.norm.bias", (d_model,), "zeros"),
        (f"{prefix}.wq", (d_model, d_model), "xavier"),
        (f"{prefix}.wk", (d_kv, d_model), "xavier"),
        (f"{prefix}.wv", (d_kv, d_model), "xavier"),
        (f"{prefix}.wo", (d_model, d_model), "xavier"),
        (f"{prefix}.bq", (d_model,), "zeros"),
        (f"{prefix}.bk", (d_model,), "zeros"),
        (f"{prefix}.bv", (d_model,), "zeros"),
        (f"{prefix}.bo", (d_model,), "zeros"),
    ]


def _ff_spec(prefix: str, d: int, ff: int) -> list[tuple[str, tuple, str]]:
    return [
        (f"{prefix}.norm.gain", (d,), "ones"),
        (f"{prefix}.norm.bias", (d,), "zeros"),
        (f"{prefix}.w1", (d, ff), "xavier"),
        (f"{prefix}.b1", (ff,), "zeros"),
        (f"{prefix}.w2", (ff, d), "xavier"),
        (f"{prefix}.b2", (d,), "zeros"),
    ]


def speech_encoder_spec(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    spec: list[tuple[str, tuple, str]] = []
    c_in = cfg.feature_dim
    for i in range(cfg.subsample_layers):
        spec.append((f"encoder.subsample.{i}.kernel", (3, c_in, cfg.enc_dim), "xavier_conv"))
        spec.append((f"encoder.subsample.{i}.bias", (cfg.enc_dim,), "zeros"))
        c_in = cfg.enc_dim
    spec.append(("encoder.rel_bias", (2 * cfg.rel_clip + 1, cfg.enc_heads), "zeros"))
    d, ff = cfg.enc_dim, cfg.enc_ff
    for i in range(cfg.enc_layers):
        pre = f"encoder.blocks.{i}"
        spec += _ff_spec(f"{pre}.ff1", d, ff)
        spec += _attn_spec(f"{pre}.attn", d, d)
        spec += [
            (f"{pre}.conv.norm.gain", (d,), "ones"),
            (f"{pre}.conv.norm.bias", (d,), "zeros"),
            (f"{pre}.conv.pw1.w", (d, 2 * d), "xavier"),
            (f"{pre}.conv.pw1.b", (2 * d,), "zeros"),
            (f"{pre}.conv.dw.kernel", (cfg.conv_kernel, d), "xavier_depthwise"),
            (f"{pre}.conv.dw.bias", (d,), "zeros"),
            (f"{pre}.conv.mid_norm.gain", (d,), "ones"),
            (f"{pre}.conv.mid_norm.bias", (d,), "zeros"),
            (f"{pre}.conv.pw2.w", (d, d), "xavier"),
            (f"{pre}.conv.pw2.b", (d,), "zeros"),
        ]
        spec += _ff_spec(f"{pre}.ff2", d, ff)
        spec.append((f"{pre}.out_norm.gain", (d,), "ones"))
        spec.append((f"{pre}.out_norm.bias", (d,), "zeros"))
    return spec


def text_encoder_spec(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    d, ff = cfg.dec_dim, cfg.dec_ff
    spec: list[tuple[str, tuple, str]] = [
        ("text_encoder.embed.tok", (cfg.vocab_size, d), "xavier"),
        ("text_encoder.embed.pos", (cfg.max_decode_len, d), "xavier"),
    ]
    for i in range(cfg.text_enc_layers):
        pre = f"text_encoder.blocks.{i}"
        spec += _attn_spec(f"{pre}.attn", d, d)
        spec += _ff_spec(f"{pre}.ff", d, ff)
    spec.append(("text_encoder.final_norm.gain", (d,), "ones"))
    spec.append(("text_encoder.final_norm.bias", (d,), "zeros"))
    return spec


def decoder_spec(cfg: ModelConfig, memory_dim: int) -> list[tuple[str, tuple, str]]:
    """Decoder parameters; ``memory_dim`` is the encoder output width the
    cross-attention reads. Names never mention the encoder family, which
    is what makes decoders interchangeable between families."""
    d, ff = cfg.dec_dim, cfg.dec_ff
    spec: list[tuple[str, tuple, str]] = [
        ("decoder.embed.tok", (cfg.vocab_size, d), "xavier"),
        ("decoder.embed.pos", (cfg.max_decode_len, d), "xavier"),
    ]
    for i in range(cfg.dec_layers):
        pre = f"decoder.blocks.{i}"
        spec += _attn_spec(f"{pre}.self_attn", d, d)
        spec += _attn_spec(f"{pre}.cross_attn", d, memory_dim)
        spec += _ff_spec(f"{pre}.ff", d, ff)
    spec.append(("decoder.final_norm.gain", (d,), "ones"))
    spec.append(("decoder.final_norm.bias", (d,), "zeros"))
    spec.append(("decoder.out_proj.w", (d, cfg.vocab_size), "xavier"))
    spec.append(("decoder.out_proj.b", (cfg.vocab_size,), "zeros"))
    return spec


def _init_array(rng: np.random.Generator, shape: tuple, kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "xavier":
        fan_in, fan_out = shape[0], shape[-1]
    elif kind == "xavier_conv":
        k, c_in, c_out = shape
        fan_in, fan_out = k * c_in, k * c_out
    elif kind == "xavier_depthwise":
        fan_in = fan_out = shape[0]
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_params(spec: list[tuple[str, tuple, str]], seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in spec:
        params[name] = Tensor(_init_array(rng, shape, kind))
    return params


def param_count(spec: list[tuple[str, tuple, str]]) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in spec)


# ------------------------------------------------------- forward helpers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _norm(p: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    x = ad.reshape(x, (n, heads, d // heads))
    return ad.transpose(x, (1, 0, 2))


def _attention(p: dict, prefix: str, x_q: Tensor, x_kv: Tensor, heads: int,
               mask: Tensor | None = None, rel: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with optional additive
    bias terms: ``mask`` (query x key) and ``rel`` (head x query x key)."""
    d = x_q.shape[-1]
    q = _split_heads(_linear(x_q, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(x_kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(x_kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d // heads))
    if rel is not None:
        scores = ad.add(scores, rel)
    if mask is not None:
        scores = ad.add(scores, mask)
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (x_q.shape[0], d))
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ff(p: dict, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def causal_mask(n: int) -> Tensor:
    """Additive mask hiding positions after the query's own."""
    return Tensor(np.triu(np.full((n, n), ad.NEG_MASK), k=1))


def _relative_bias(p: dict, n: int, clip: int) -> Tensor:
    """Per-head additive attention bias indexed by clipped key-query
    distance; one shared table for all encoder layers."""
    offsets = np.arange(n)[None, :] - np.arange(n)[:, None]
    idx = np.clip(offsets, -clip, clip) + clip
    bias = ad.take_rows(p["encoder.rel_bias"], idx)
    return ad.transpose(bias, (2, 0, 1))


def _conformer_block(p: dict, pre: str, x: Tensor, cfg: ModelConfig, rel: Tensor) -> Tensor:
    h = _ff(p, f"{pre}.ff1", _norm(p, f"{pre}.ff1.norm", x))
    x = ad.add(x, ad.mul(h, 0.5))
    a_in = _norm(p, f"{pre}.attn.norm", x)
    x = ad.add(x, _attention(p, f"{pre}.attn", a_in, a_in, cfg.enc_heads, rel=rel))
    c = _norm(p, f"{pre}.conv.norm", x)
    c = _linear(c, p[f"{pre}.conv.pw1.w"], p[f"{pre}.conv.pw1.b"])
    d = cfg.enc_dim
    gate = ad.sigmoid(ad.narrow(c, 1, d, d))
    c = ad.mul(ad.narrow(c, 1, 0, d), gate)
    c = ad.add(ad.depthwise_conv1d(c, p[f"{pre}.conv.dw.kernel"]), p[f"{pre}.conv.dw.bias"])
    c = ad.gelu(_norm(p, f"{pre}.conv.mid_norm", c))
    c = _linear(c, p[f"{pre}.conv.pw2.w"], p[f"{pre}.conv.pw2.b"])
    x = ad.add(x, c)
    h = _ff(p, f"{pre}.ff2", _norm(p, f"{pre}.ff2.norm", x))
    x = ad.add(x, ad.mul(h, 0.5))
    return _norm(p, f"{pre}.out_norm", x)


def _decoder_forward(p: dict, cfg: ModelConfig, input_ids: list[int], memory: Tensor) -> Tensor:
    n = len(input_ids)
    if n == 0:
        raise ad.ShapeError("decoder input must be non-empty")
    if n > cfg.max_decode_len:
        raise ad.ShapeError(f"decoder input length {n} exceeds max_decode_len {cfg.max_decode_len}")
    ids = np.asarray(input_ids)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabError("decoder input contains out-of-range token ids")
    x = ad.add(
        ad.take_rows(p["decoder.embed.tok"], ids),
        ad.take_rows(p["decoder.embed.pos"], np.arange(n)),
    )
    mask = causal_mask(n)
    for i in range(cfg.dec_layers):
        pre = f"decoder.blocks.{i}"
        s_in = _norm(p, f"{pre}.self_attn.norm", x)
        x = ad.add(x, _attention(p, f"{pre}.self_attn", s_in, s_in, cfg.dec_heads, mask=mask))
        c_in = _norm(p, f"{pre}.cross_attn.norm", x)
        x = ad.add(x, _attention(p, f"{pre}.cross_attn", c_in, memory, cfg.dec_heads))
        f_in = _norm(p, f"{pre}.ff.norm", x)
        x = ad.add(x, _ff(p, f"{pre}.ff", f_in))
    x = _norm(p, "decoder.final_norm", x)
    logits = _linear(x, p["decoder.out_proj.w"], p["decoder.out_proj.b"])
    return ad.softmax(logits, axis=-1)


class _Seq2Seq:
    """Shared behavior: parameter store plus the decoder-side API."""

    kind = "base"

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        config.validate()
        if len(vocab) != config.vocab_size:
            raise ConfigError(
                f"vocabulary size {len(vocab)} does not match config vocab_size {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.params = build_params(self.param_spec(), seed)

    def param_spec(self) -> list[tuple[str, tuple, str]]:
        raise NotImplementedError

    def encode(self, source) -> Tensor:
        raise NotImplementedError

    # -- parameter plumbing

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params)
        if set(arrays) != expected:
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise ConfigError(f"parameter name mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {arr.shape} vs {self.params[name].shape}"
                )
            self.params[name] = Tensor(np.asarray(arr, dtype=np.float64).copy())

    def watch_all(self, tape: ad.Tape) -> None:
        for t in self.params.values():
            tape.watch(t)

    # -- decoding API shared by both families

    def decode_step(self, prefix_ids: list[int], memory: Tensor) -> Tensor:
        """Next-token distribution after consuming ``prefix_ids`` (which
        must start with the sequence-start token)."""
        if not prefix_ids or prefix_ids[0] != Vocabulary.SOS:
            raise VocabError("decode prefix must start with the sequence-start token")
        dists = _decoder_forward(self.params, self.config, prefix_ids, memory)
        last = ad.narrow(dists, 0, len(prefix_ids) - 1, 1)
        return ad.reshape(last, (self.config.vocab_size,))

    def teacher_forced(self, source, target_ids: list[int]) -> Tensor:
        """Distributions over every target position given gold history.

        ``target_ids`` must end with the sequence-end token; the decoder
        input is the target shifted right behind a sequence-start token.
        Returns an (L, vocab) tensor of softmax rows.
        """
        if not target_ids:
            raise VocabError("target sequence is empty")
        if target_ids[-1] != Vocabulary.EOS:
            raise VocabError("target sequence must end with the sequence-end token")
        memory = self.encode(source)
        input_ids = [Vocabulary.SOS] + list(target_ids[:-1])
        return _decoder_forward(self.params, self.config, input_ids, memory)


class SpeechToTextModel(_Seq2Seq):
    """Conformer encoder over frame features, transformer decoder."""

    kind = "speech"

    def param_spec(self):
        return speech_encoder_spec(self.config) + decoder_spec(self.config, self.config.enc_dim)

    def encode(self, features) -> Tensor:
        cfg = self.config
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
            raise ad.ShapeError(
                f"features must be (frames, {cfg.feature_dim}), got {x.shape}"
            )
        if x.shape[0] < cfg.subsample_rate:
            raise ad.ShapeError(
                f"need at least {cfg.subsample_rate} frames, got {x.shape[0]}"
            )
        p = self.params
        n_stride2 = max(cfg.subsample_rate.bit_length() - 1, 0)
        for i in range(cfg.subsample_layers):
            stride = 2 if i < n_stride2 else 1
            x = ad.conv1d(x, p[f"encoder.subsample.{i}.kernel"], stride=stride, padding=1)
            x = ad.gelu(ad.add(x, p[f"encoder.subsample.{i}.bias"]))
        rel = _relative_bias(p, x.shape[0], cfg.rel_clip)
        for i in range(cfg.enc_layers):
            x = _conformer_block(p, f"encoder.blocks.{i}", x, cfg, rel)
        return x


class TextToTextModel(_Seq2Seq):
    """Transformer encoder over token ids, the same transformer decoder."""

    kind = "text"

    def param_spec(self):
        return text_encoder_spec(self.config) + decoder_spec(self.config, self.config.dec_dim)

    def encode(self, source_ids) -> Tensor:
        cfg = self.config
        ids = np.asarray(source_ids)
        if ids.ndim != 1 or ids.size == 0:
            raise ad.ShapeError("text encoder input must be a non-empty 1-D id sequence")
        if ids.size > cfg.max_decode_len:
            raise ad.ShapeError(
                f"text encoder input length {ids.size} exceeds max_decode_len {cfg.max_decode_len}"
            )
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise VocabError("text encoder input contains out-of-range token ids")
        p = self.params
        x = ad.add(
            ad.take_rows(p["text_encoder.embed.tok"], ids),
            ad.take_rows(p["text_encoder.embed.pos"], np.arange(ids.size)),
        )
        for i in range(cfg.text_enc_layers):
            pre = f"text_encoder.blocks.{i}"
            a_in = _norm(p, f"{pre}.attn.norm", x)
            x = ad.add(x, _attention(p, f"{pre}.attn", a_in, a_in, cfg.dec_heads))
            f_in = _norm(p, f"{pre}.ff.norm", x)
            x = ad.add(x, _ff(p, f"{pre}.ff", f_in))
        return _norm(p, "text_encoder.final_norm", x)


def build_model(kind: str, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> _Seq2Seq:
    if kind == "speech":
        return SpeechToTextModel(config, vocab, seed)
    if kind == "text":
        return TextToTextModel(config, vocab, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def subsampled_length(cfg: ModelConfig, frames: int) -> int:
    """Encoder output length for a given frame count (ceil division per
    stride-2 layer)."""
    n = frames
    for _ in range(max(cfg.subsample_rate.bit_length() - 1, 0)):
        n = (n + 1) // 2
    return n
