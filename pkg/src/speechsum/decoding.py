"""Greedy and beam-search decoding.

Both decoders only need two model methods, ``encode(source)`` and
``decode_step(prefix_ids, memory)``, so tests can drive them with rigged
stand-in models emitting hand-chosen distributions.

Beam search keeps, per step, the globally best ``width`` one-token
extensions of the live hypotheses. Extensions ending in the sequence-end
token retire to a finished pool that never evicts; the rest stay live.
Ranking is everywhere deterministic: candidates order by (log-prob,
token id, parent index) and finished hypotheses by (final score, pool
insertion order), so equal-score races always resolve the same way.

The final score is log-probability plus a length reward (weight *
length), favoring longer output when the weight is positive. A
hypothesis that reaches the length limit without the end token is
force-finished as is; its score carries no end-token term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Vocabulary

# Scoring floor: an exactly-zero probability becomes a huge but finite
# log penalty instead of -inf.
SCORE_FLOOR = 1e-300


class DecodeError(ValueError):
    """Decoding was configured inconsistently with the model."""


@dataclass
class Hypothesis:
    """One decoded candidate.

    ``tokens`` are the generated ids; the trailing sequence-end id is
    included when the model emitted one (``emitted_end``), absent when
    the hypothesis hit the length limit. ``logp`` is the sum of the
    generated tokens' log-probabilities; ``score`` adds the length
    reward once finished.
    """

    tokens: list[int] = field(default_factory=list)
    logp: float = 0.0
    finished: bool = False
    emitted_end: bool = False
    score: float = 0.0


@dataclass
class BeamConfig:
    width: int = 8
    length_reward: float = 0.3
    max_len: int = 32
    end_detection: bool = True

    def validate(self) -> "BeamConfig":
        if self.width < 1:
            raise DecodeError(f"beam width must be at least 1, got {self.width}")
        if self.max_len < 1:
            raise DecodeError(f"max decode length must be at least 1, got {self.max_len}")
        return self


def _check_length(model, max_len: int) -> None:
    # The decoder consumes a start token plus the generated prefix, so the
    # longest usable output is one below the positional-table size.
    limit = model.config.max_decode_len - 1
    if max_len > limit:
        raise DecodeError(
            f"max decode length {max_len} exceeds the model's positional capacity {limit}"
        )


def _step_log_probs(model, prefix: list[int], memory) -> np.ndarray:
    probs = model.decode_step(prefix, memory).data
    return np.log(np.maximum(probs, SCORE_FLOOR))


def greedy_decode(model, source, max_len: int = 32) -> list[int]:
    """Pick the argmax token each step until the end token or the length
    limit; ties go to the lowest token id. Returns generated ids,
    including the trailing end token when one was emitted."""
    if max_len < 1:
        raise DecodeError(f"max decode length must be at least 1, got {max_len}")
    _check_length(model, max_len)
    memory = model.encode(source)
    prefix = [Vocabulary.SOS]
    tokens: list[int] = []
    for _ in range(max_len):
        log_p = _step_log_probs(model, prefix, memory)
        token = int(np.argmax(log_p))
        tokens.append(token)
        if token == Vocabulary.EOS:
            break
        prefix.append(token)
    return tokens


def detect_end(active: list[Hypothesis], finished: list[Hypothesis], step: int,
               config: BeamConfig) -> bool:
    """True when no live hypothesis can still beat the best finished one.

    A live hypothesis's log-prob only falls as it grows, so its best
    conceivable final score is its current log-prob plus the largest
    reachable length reward. Once the finished pool matches that bound
    the search cannot improve its top result (equal-score latecomers
    lose the insertion-order tie-break anyway).
    """
    if not active:
        return True
    if not finished:
        return False
    best_finished = max(h.score for h in finished)
    alpha = config.length_reward
    best_possible = -np.inf
    for hyp in active:
        if alpha >= 0:
            reach = hyp.logp + alpha * config.max_len
        else:
            reach = hyp.logp + alpha * (len(hyp.tokens) + 1)
        best_possible = max(best_possible, reach)
    return best_finished >= best_possible


def beam_search(model, source, config: BeamConfig | None = None) -> list[Hypothesis]:
    """Beam-decode one source; returns finished hypotheses best-first.

    Width 1 reproduces greedy decoding token for token, and a width
    covering every candidate reproduces exhaustive search.
    """
    config = (config or BeamConfig()).validate()
    _check_length(model, config.max_len)
    memory = model.encode(source)
    active: list[Hypothesis] = [Hypothesis()]
    finished: list[tuple[float, int, Hypothesis]] = []  # (-score, insertion, hyp)
    insertions = 0
    for step in range(config.max_len):
        candidates: list[tuple[float, int, int]] = []  # (-logp, token, parent)
        per_parent_logs = []
        for parent_idx, hyp in enumerate(active):
            log_p = _step_log_probs(model, [Vocabulary.SOS] + hyp.tokens, memory)
            per_parent_logs.append(log_p)
            for token in range(log_p.shape[0]):
                candidates.append((-(hyp.logp + float(log_p[token])), token, parent_idx))
        candidates.sort()
        next_active: list[Hypothesis] = []
        for neg_logp, token, parent_idx in candidates[:config.width]:
            parent = active[parent_idx]
            child = Hypothesis(tokens=parent.tokens + [token], logp=-neg_logp)
            if token == Vocabulary.EOS:
                child.finished = True
                child.emitted_end = True
                child.score = child.logp + config.length_reward * len(child.tokens)
                finished.append((-child.score, insertions, child))
                insertions += 1
            else:
                next_active.append(child)
        active = next_active
        if config.end_detection and detect_end(active, [f[2] for f in finished], step, config):
            active = []
            break
        if not active:
            break
    for hyp in active:  # length limit reached: finish as-is
        hyp.finished = True
        hyp.score = hyp.logp + config.length_reward * len(hyp.tokens)
        finished.append((-hyp.score, insertions, hyp))
        insertions += 1
    finished.sort(key=lambda item: (item[0], item[1]))
    return [hyp for _, _, hyp in finished]


def strip_specials(tokens: list[int]) -> list[int]:
    """Drop reserved ids (and everything after the first end token)."""
    out = []
    for t in tokens:
        if t == Vocabulary.EOS:
            break
        if t in (Vocabulary.PAD, Vocabulary.SOS, Vocabulary.MASK):
            continue
        out.append(t)
    return out


def write_decodes(path: str, decoded: list[tuple[str, list[int]]], vocab: Vocabulary) -> None:
    """Write ``uid<TAB>space-joined tokens`` lines, one per sample, with
    reserved ids removed."""
    lines = []
    for uid, tokens in decoded:
        words = vocab.decode(strip_specials(tokens))
        lines.append(f"{uid}\t{' '.join(words)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
