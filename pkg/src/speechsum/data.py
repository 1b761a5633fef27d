"""Deterministic synthetic corpus of (speech features, transcript,
summary) triplets.

Each content word owns a fixed feature template (frames_per_word x
feature_dim); an utterance's features are its words' templates
concatenated plus gaussian noise, so transcription is learnable but not
trivial. Summaries follow a fixed rule: a two-word written-style
prefix, the transcript's keywords in order, and a two-word suffix. The
frame words never occur in speech, mimicking a written style the
summarizer must produce without hearing it.

Every random draw derives from the corpus seed through per-sample seed
sequences, so generation is bit-reproducible and order-independent.

A second, text-only pair source provides extra summarization data; its
sources can be rendered to features with a different template bank and
noise level (a synthetic voice). Samples so produced are flagged
``artificial`` and training keeps them in separate batches from real
recordings.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import Vocabulary


class DataError(ValueError):
    """Corpus configuration or stored corpus files are invalid."""


@dataclass
class CorpusConfig:
    n_keywords: int = 12
    n_frame: int = 4
    n_ordinary: int = 44
    frames_per_word: int = 8
    feature_dim: int = 16
    noise_sigma: float = 0.1
    min_len: int = 6
    max_len: int = 20
    keyword_prob: float = 0.25
    max_frames: int = 160
    n_train: int = 2000
    n_val: int = 200
    n_eval: int = 200
    seed: int = 0
    # text-only pair source + synthetic voice rendering
    n_external: int = 1000
    ext_min_len: int = 4
    ext_max_len: int = 14
    synth_sigma: float = 0.15

    @property
    def vocab_size(self) -> int:
        return self.n_keywords + self.n_frame + self.n_ordinary

    def validate(self) -> "CorpusConfig":
        if min(self.n_keywords, self.n_ordinary) < 1 or self.n_frame != 4:
            raise DataError("need at least one keyword and ordinary word, and exactly four frame words")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError(f"bad transcript length range [{self.min_len}, {self.max_len}]")
        if not 1 <= self.ext_min_len <= self.ext_max_len:
            raise DataError(f"bad external length range [{self.ext_min_len}, {self.ext_max_len}]")
        if not 0.0 < self.keyword_prob < 1.0:
            raise DataError("keyword_prob must lie strictly between 0 and 1")
        if self.frames_per_word < 1 or self.feature_dim < 1:
            raise DataError("frames_per_word and feature_dim must be positive")
        if self.max_frames < self.frames_per_word:
            raise DataError("max_frames cannot hold even one word")
        if min(self.n_train, self.n_val, self.n_eval) < 1:
            raise DataError("every split needs at least one sample")
        if self.noise_sigma < 0 or self.synth_sigma < 0:
            raise DataError("noise levels must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d).validate()


@dataclass
class Triplet:
    uid: str
    words: list[str]          # spoken transcript tokens
    summary: list[str]        # summary tokens (frame + keywords)
    features: np.ndarray      # (frames, feature_dim) float64


@dataclass
class Sample:
    """One training/eval item: model-ready source and target ids.

    ``target`` always ends with the sequence-end id. ``artificial``
    marks synthetic-voice renderings of text-only pairs.
    """

    uid: str
    source: object
    target: list[int]
    artificial: bool = False


def corpus_words(cfg: CorpusConfig) -> tuple[list[str], list[str], list[str]]:
    """(keywords, frame words, ordinary words), fixed naming scheme."""
    keywords = [f"kw{i:02d}" for i in range(cfg.n_keywords)]
    frame = [f"fm{i}" for i in range(cfg.n_frame)]
    ordinary = [f"word{i:02d}" for i in range(cfg.n_ordinary)]
    return keywords, frame, ordinary


def build_vocabulary(cfg: CorpusConfig) -> Vocabulary:
    keywords, frame, ordinary = corpus_words(cfg)
    return Vocabulary(keywords + frame + ordinary)


def summary_rule(words: list[str], cfg: CorpusConfig) -> list[str]:
    """Prefix + the transcript's keywords in order + suffix."""
    keywords, frame, _ = corpus_words(cfg)
    keyword_set = set(keywords)
    picked = [w for w in words if w in keyword_set]
    return frame[:2] + picked + frame[2:]


def _template_bank(cfg: CorpusConfig, bank_seed: int) -> np.ndarray:
    """(vocab words, frames_per_word, feature_dim) fixed templates."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, bank_seed]))
    return rng.uniform(-1.0, 1.0, size=(cfg.vocab_size, cfg.frames_per_word, cfg.feature_dim))

_REAL_BANK = 1
_SYNTH_BANK = 2


def _word_index(cfg: CorpusConfig) -> dict[str, int]:
    keywords, frame, ordinary = corpus_words(cfg)
    return {w: i for i, w in enumerate(keywords + frame + ordinary)}


def render_features(words: list[str], cfg: CorpusConfig, bank: np.ndarray,
                    sigma: float, rng: np.random.Generator) -> np.ndarray:
    index = _word_index(cfg)
    rows = [bank[index[w]] for w in words]
    feats = np.concatenate(rows, axis=0)
    feats = feats + rng.normal(0.0, sigma, size=feats.shape)
    return feats[:cfg.max_frames]


def nearest_words(features: np.ndarray, cfg: CorpusConfig,
                  synthetic: bool = False) -> list[str]:
    """Recover a transcript by matching each frames_per_word block to
    the closest template. At zero noise this inverts the rendering
    exactly, which makes it a perfect-recognizer debugging oracle."""
    bank = _template_bank(cfg, _SYNTH_BANK if synthetic else _REAL_BANK)
    keywords, frame, ordinary = corpus_words(cfg)
    names = keywords + frame + ordinary
    m = cfg.frames_per_word
    out = []
    for start in range(0, features.shape[0] - m + 1, m):
        block = features[start:start + m]
        dists = np.sum((bank - block[None, :, :]) ** 2, axis=(1, 2))
        out.append(names[int(np.argmin(dists))])
    return out


def _draw_transcript(cfg: CorpusConfig, rng: np.random.Generator,
                     min_len: int, max_len: int) -> list[str]:
    keywords, _, ordinary = corpus_words(cfg)
    length = int(rng.integers(min_len, max_len + 1))
    words = []
    for _ in range(length):
        if rng.random() < cfg.keyword_prob:
            words.append(keywords[int(rng.integers(len(keywords)))])
        else:
            words.append(ordinary[int(rng.integers(len(ordinary)))])
    return words


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    splits: dict[str, list[Triplet]] = field(default_factory=dict)

    SPLIT_NAMES = ("train", "val", "eval")


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Generate all three splits deterministically from the seed."""
    cfg.validate()
    vocab = build_vocabulary(cfg)
    bank = _template_bank(cfg, _REAL_BANK)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "eval": cfg.n_eval}
    splits: dict[str, list[Triplet]] = {}
    for split_idx, split in enumerate(Corpus.SPLIT_NAMES):
        items = []
        for i in range(sizes[split]):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10 + split_idx, i]))
            words = _draw_transcript(cfg, rng, cfg.min_len, cfg.max_len)
            feats = render_features(words, cfg, bank, cfg.noise_sigma, rng)
            items.append(Triplet(
                uid=f"{split}-{i:05d}",
                words=words,
                summary=summary_rule(words, cfg),
                features=feats,
            ))
        splits[split] = items
    return Corpus(config=cfg, vocab=vocab, splits=splits)


def external_pairs(cfg: CorpusConfig) -> list[tuple[str, list[str], list[str]]]:
    """Text-only (uid, source words, summary) pairs from a disjoint seed
    stream, with their own length range. No audio exists for these."""
    cfg.validate()
    out = []
    for i in range(cfg.n_external):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 20, i]))
        words = _draw_transcript(cfg, rng, cfg.ext_min_len, cfg.ext_max_len)
        out.append((f"ext-{i:05d}", words, summary_rule(words, cfg)))
    return out


def full_scale_corpus_reference() -> dict:
    """Corpus dimensions a full-scale run of this recipe would use,
    recorded for documentation; nothing here is generated or trained."""
    return {
        "n_train": 68336,
        "n_val": 1600,
        "n_eval": 2127,
        "feature_dim": 43,
        "subset_sizes": {"0.06": 4243, "0.31": 21311, "0.62": 42549},
    }


# ------------------------------------------------------------------ views


VIEW_KINDS = ("asr", "tsum", "ssum", "lm")


@dataclass
class LmNoiseConfig:
    """Corruption for the denoising text pre-training view: each token
    is replaced by the mask id with ``mask_prob``, then ``swap_frac`` of
    adjacent pairs are swapped. Both zero makes the view an identity."""

    mask_prob: float = 0.3
    swap_frac: float = 0.25

    def validate(self) -> "LmNoiseConfig":
        if not 0.0 <= self.mask_prob <= 1.0 or not 0.0 <= self.swap_frac <= 1.0:
            raise DataError("noise fractions must lie in [0, 1]")
        return self


def _noise_tokens(ids: list[int], noise: LmNoiseConfig, rng: np.random.Generator) -> list[int]:
    out = list(ids)
    for k in range(len(out)):
        if rng.random() < noise.mask_prob:
            out[k] = Vocabulary.MASK
    n_swaps = int(np.floor(noise.swap_frac * max(len(out) - 1, 0)))
    for _ in range(n_swaps):
        pos = int(rng.integers(0, len(out) - 1))
        out[pos], out[pos + 1] = out[pos + 1], out[pos]
    return out


def view(corpus: Corpus, kind: str, split: str,
         noise: LmNoiseConfig | None = None) -> list[Sample]:
    """Project one split into model-ready samples for a task.

    asr: features -> transcript; tsum: transcript -> summary;
    ssum: features -> summary; lm: corrupted summary -> summary.
    """
    if kind not in VIEW_KINDS:
        raise DataError(f"unknown view kind {kind!r}; expected one of {VIEW_KINDS}")
    if split not in corpus.splits:
        raise DataError(f"unknown split {split!r}")
    vocab = corpus.vocab
    noise = (noise or LmNoiseConfig()).validate()
    samples = []
    for idx, triplet in enumerate(corpus.splits[split]):
        transcript_ids = vocab.encode(triplet.words)
        summary_ids = vocab.encode(triplet.summary)
        if kind == "asr":
            source, target = triplet.features, transcript_ids
        elif kind == "tsum":
            source, target = transcript_ids, summary_ids
        elif kind == "ssum":
            source, target = triplet.features, summary_ids
        else:  # lm
            split_idx = Corpus.SPLIT_NAMES.index(split) if split in Corpus.SPLIT_NAMES else 9
            rng = np.random.default_rng(
                np.random.SeedSequence([corpus.config.seed, 30, split_idx, idx])
            )
            source, target = _noise_tokens(summary_ids, noise, rng), summary_ids
        samples.append(Sample(
            uid=triplet.uid,
            source=source,
            target=list(target) + [Vocabulary.EOS],
        ))
    return samples


def subset(samples: list[Sample], fraction: float, seed: int) -> list[Sample]:
    """Random subset of round(fraction * n) samples, original order
    preserved. fraction 1.0 returns the list unchanged."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(samples)
    n = int(round(fraction * len(samples)))
    if n < 1:
        raise DataError(f"fraction {fraction} of {len(samples)} samples leaves nothing")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 40]))
    chosen = sorted(rng.choice(len(samples), size=n, replace=False))
    return [samples[i] for i in chosen]


def synth_augment(corpus: Corpus, limit: int | None = None) -> list[Sample]:
    """Render the text-only pairs to features with the synthetic voice
    (a different template bank and noise level) for summarization
    training. Every produced sample is flagged artificial."""
    cfg = corpus.config
    bank = _template_bank(cfg, _SYNTH_BANK)
    vocab = corpus.vocab
    samples = []
    for i, (uid, words, summary) in enumerate(external_pairs(cfg)):
        if limit is not None and i >= limit:
            break
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21, i]))
        feats = render_features(words, cfg, bank, cfg.synth_sigma, rng)
        samples.append(Sample(
            uid=uid,
            source=feats,
            target=vocab.encode(summary) + [Vocabulary.EOS],
            artificial=True,
        ))
    return samples


def external_text_view(corpus: Corpus, limit: int | None = None) -> list[Sample]:
    """The text-only pairs as transcript -> summary samples (no audio)."""
    vocab = corpus.vocab
    samples = []
    for i, (uid, words, summary) in enumerate(external_pairs(corpus.config)):
        if limit is not None and i >= limit:
            break
        samples.append(Sample(
            uid=uid,
            source=vocab.encode(words),
            target=vocab.encode(summary) + [Vocabulary.EOS],
        ))
    return samples


# ------------------------------------------------------------ persistence


_FEATURE_MAGIC = b"FEAT"


def _write_features(path: str, feats: np.ndarray) -> None:
    frames, dim = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", frames, dim))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def _read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FEATURE_MAGIC:
        raise DataError(f"{path} is not a feature file")
    frames, dim = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    if len(payload) != frames * dim * 4:
        raise DataError(f"{path} is truncated: {len(payload)} bytes for {frames}x{dim}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(frames, dim)


def save_corpus(corpus: Corpus, out_dir: str) -> None:
    """Persist a corpus: config json, manifest, token files, one binary
    feature file per utterance (frame count, dim, then 32-bit floats)."""
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({"config": corpus.config.to_dict()}, fh, indent=2, sort_keys=True)
    manifest, transcripts, summaries = [], [], []
    for split in Corpus.SPLIT_NAMES:
        for t in corpus.splits[split]:
            manifest.append(f"{t.uid}\t{split}")
            transcripts.append(f"{t.uid}\t{' '.join(t.words)}")
            summaries.append(f"{t.uid}\t{' '.join(t.summary)}")
            _write_features(os.path.join(out_dir, "features", f"{t.uid}.bin"), t.features)
    for name, lines in (("manifest.tsv", manifest), ("transcriptions.tsv", transcripts),
                        ("summaries.tsv", summaries)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def load_corpus(corpus_dir: str) -> Corpus:
    """Load a persisted corpus. Features come back float64 but carry
    32-bit precision; training always reads from disk so results do not
    depend on whether a corpus was freshly generated."""
    config_path = os.path.join(corpus_dir, "corpus.json")
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = CorpusConfig.from_dict(json.load(fh)["config"])
    except OSError as exc:
        raise DataError(f"cannot read corpus config {config_path}: {exc}") from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed corpus config {config_path}: {exc}") from exc
    manifest: dict[str, str] = {}
    with open(os.path.join(corpus_dir, "manifest.tsv"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, split = line.split("\t")
            if split not in Corpus.SPLIT_NAMES:
                raise DataError(f"manifest lists unknown split {split!r}")
            manifest[uid] = split
    transcripts = _read_tsv(os.path.join(corpus_dir, "transcriptions.tsv"))
    summaries = _read_tsv(os.path.join(corpus_dir, "summaries.tsv"))
    if set(manifest) != set(transcripts) or set(manifest) != set(summaries):
        raise DataError("manifest and token files disagree on sample ids")
    splits: dict[str, list[Triplet]] = {name: [] for name in Corpus.SPLIT_NAMES}
    for uid in manifest:
        feats = _read_features(os.path.join(corpus_dir, "features", f"{uid}.bin"))
        splits[manifest[uid]].append(Triplet(
            uid=uid,
            words=transcripts[uid].split(),
            summary=summaries[uid].split(),
            features=feats,
        ))
    for name in splits:
        splits[name].sort(key=lambda t: t.uid)
    return Corpus(config=cfg, vocab=build_vocabulary(cfg), splits=splits)


def _read_tsv(path: str) -> dict[str, str]:
    table: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, text = line.split("\t", 1)
            table[uid] = text
    return table


def reference_file(corpus: Corpus, split: str, path: str, what: str = "summary") -> None:
    """Write gold summaries (or transcripts) for a split as a token file
    usable by the evaluator."""
    if what not in ("summary", "transcript"):
        raise DataError(f"unknown reference kind {what!r}")
    lines = []
    for t in corpus.splits[split]:
        text = " ".join(t.summary if what == "summary" else t.words)
        lines.append(f"{t.uid}\t{text}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
