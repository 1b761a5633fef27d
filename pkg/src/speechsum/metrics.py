"""Summary and transcription quality metrics.

Conventions (pinned by hand-checked values in the tests):

* n-gram overlap and subsequence scores return percentages in [0, 100];
* the unigram harmonic metric (``meteor``) returns a fraction in [0, 1];
* word error rate is a percentage of the reference length and may
  exceed 100 when the hypothesis is much longer than the reference.

Corpus aggregation averages per-sample scores for the summary metrics
but pools edit counts for error rate (total edits over total reference
words), so short references are not over-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """Metric input is unusable (empty reference, mismatched files)."""


_PUNCT = set(".,;:!?()[]{}\"'`")


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation from words, split on whitespace."""
    out: list[str] = []
    for raw in text.lower().split():
        word = []
        for ch in raw:
            if ch in _PUNCT:
                if word:
                    out.append("".join(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append("".join(word))
    return out


def _counts(tokens: list[str]) -> dict:
    c: dict = {}
    for t in tokens:
        c[t] = c.get(t, 0) + 1
    return c


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge_n(hyp: list[str], ref: list[str], n: int) -> tuple[float, float, float]:
    """Clipped n-gram overlap; returns (precision, recall, f1) * 100.

    Either side shorter than n (or empty) scores zero.
    """
    if n < 1:
        raise MetricError(f"n-gram order must be positive, got {n}")
    hyp_grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
    ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    if not hyp_grams or not ref_grams:
        return 0.0, 0.0, 0.0
    ref_counts = _counts(ref_grams)
    overlap = 0
    for gram, count in _counts(hyp_grams).items():
        overlap += min(count, ref_counts.get(gram, 0))
    precision = overlap / len(hyp_grams)
    recall = overlap / len(ref_grams)
    return 100 * precision, 100 * recall, 100 * _f1(precision, recall)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hyp: list[str], ref: list[str]) -> tuple[float, float, float]:
    """Longest-common-subsequence overlap; (precision, recall, f1) * 100."""
    if not hyp or not ref:
        return 0.0, 0.0, 0.0
    lcs = _lcs_length(hyp, ref)
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 100 * precision, 100 * recall, 100 * _f1(precision, recall)


# ----------------------------------------------------------------- meteor


def _greedy_chunks(hyp: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Full-size matching built by repeatedly taking the longest common
    contiguous run among unmatched positions. Valid but possibly
    suboptimal in chunk count; used to seed the exact search."""
    hyp_free = [True] * len(hyp)
    ref_free = [True] * len(ref)
    pairs: list[tuple[int, int]] = []
    while True:
        best_len, best_i, best_j = 0, -1, -1
        for i in range(len(hyp)):
            for j in range(len(ref)):
                length = 0
                while (i + length < len(hyp) and j + length < len(ref)
                       and hyp_free[i + length] and ref_free[j + length]
                       and hyp[i + length] == ref[j + length]):
                    length += 1
                if length > best_len:
                    best_len, best_i, best_j = length, i, j
        if best_len == 0:
            break
        for k in range(best_len):
            hyp_free[best_i + k] = False
            ref_free[best_j + k] = False
            pairs.append((best_i + k, best_j + k))
    return sorted(pairs)


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _min_chunks(hyp: list[str], ref: list[str], total_matches: int,
                node_budget: int = 250_000) -> int:
    """Minimum chunk count over all maximum matchings, by depth-first
    search with pruning, seeded with the greedy solution.

    The search is exact unless the node budget trips (pathological
    repeated-token inputs), in which case the best bound found so far is
    returned.
    """
    best = _chunk_count(_greedy_chunks(hyp, ref))
    if best <= 1 or total_matches == 0:
        return best
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_positions.setdefault(w, []).append(j)
    hyp_counts = _counts(hyp)
    ref_counts = _counts(ref)
    # How many occurrences of each word may be skipped on each side.
    surplus = {w: hyp_counts[w] - min(hyp_counts[w], ref_counts.get(w, 0)) for w in hyp_counts}
    nodes = 0

    def search(i: int, used: set, skipped: dict, matched: int,
               chunks: int, prev: tuple[int, int] | None) -> None:
        nonlocal best, nodes
        nodes += 1
        if nodes > node_budget or chunks >= best:
            return
        if i == len(hyp):
            if matched == total_matches:
                best = min(best, chunks)
            return
        word = hyp[i]
        for j in ref_positions.get(word, ()):
            if j in used:
                continue
            extends = prev is not None and prev == (i - 1, j - 1)
            search(i + 1, used | {j}, skipped, matched + 1,
                   chunks if extends else chunks + 1, (i, j))
        if skipped.get(word, 0) < surplus.get(word, 0):
            bumped = dict(skipped)
            bumped[word] = bumped.get(word, 0) + 1
            search(i + 1, used, bumped, matched, chunks, prev)

    search(0, set(), {}, 0, 0, None)
    return best


def meteor(hyp: list[str], ref: list[str]) -> float:
    """Exact-unigram harmonic metric in [0, 1].

    Matches are the multiset intersection of tokens. The recall-weighted
    harmonic mean 10PR / (R + 9P) is discounted by a fragmentation
    penalty 0.5 * (chunks / matches)^3, where chunks is the minimal
    number of contiguous matched runs over all maximum matchings. Ten
    identical tokens score 1 * (1 - 0.5 * 0.1^3) = 0.9995.
    """
    if not hyp or not ref:
        return 0.0
    ref_counts = _counts(ref)
    matches = 0
    for word, count in _counts(hyp).items():
        matches += min(count, ref_counts.get(word, 0))
    if matches == 0:
        return 0.0
    precision = matches / len(hyp)
    recall = matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = _min_chunks(hyp, ref, matches)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


# -------------------------------------------------------------------- wer


def edit_distance(hyp: list[str], ref: list[str]) -> int:
    """Word-level Levenshtein distance (substitution, insertion,
    deletion all cost one)."""
    if not ref:
        return len(hyp)
    prev = list(range(len(ref) + 1))
    for i in range(1, len(hyp) + 1):
        cur = [i] + [0] * len(ref)
        for j in range(1, len(ref) + 1):
            sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def wer(hyp: list[str], ref: list[str]) -> float:
    """Word error rate as a percentage of the reference length.

    Unbounded above: a hypothesis much longer than its reference can
    exceed 100. An empty reference is an error.
    """
    if not ref:
        raise MetricError("word error rate against an empty reference is undefined")
    return 100.0 * edit_distance(hyp, ref) / len(ref)


# ------------------------------------------------------------- reporting


@dataclass
class ScoreReport:
    """Corpus-level scores plus the per-sample breakdown.

    All stored corpus values are on the 0-100 reporting scale (the
    unigram harmonic metric is scaled by 100 here; its function form
    stays in [0, 1]).
    """

    n_samples: int
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    wer: float | None = None
    per_sample: dict[str, dict[str, float]] = field(default_factory=dict)

    COLUMNS = ("rouge1", "rouge2", "rougeL", "meteor")

    def machine_lines(self, prefix: str = "") -> list[str]:
        lines = [f"{prefix}n_samples={self.n_samples}"]
        for col in self.COLUMNS:
            lines.append(f"{prefix}{col}={getattr(self, col):.6f}")
        if self.wer is not None:
            lines.append(f"{prefix}wer={self.wer:.6f}")
        return lines

    def as_text(self) -> str:
        parts = [f"{col} {getattr(self, col):6.2f}" for col in self.COLUMNS]
        if self.wer is not None:
            parts.append(f"wer {self.wer:6.2f}")
        return "  ".join(parts)


def read_token_file(path: str) -> dict[str, str]:
    """Read ``uid<TAB>text`` lines; text may be empty."""
    table: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise MetricError(f"{path}:{lineno}: expected uid<TAB>text")
            uid, text = line.split("\t", 1)
            if uid in table:
                raise MetricError(f"{path}:{lineno}: duplicate id {uid!r}")
            table[uid] = text
    return table


def score_pairs(pairs: list[tuple[str, str, str]], include_wer: bool = False) -> ScoreReport:
    """Score (uid, hypothesis text, reference text) triples.

    Summary metrics are averaged per sample; error rate, when requested,
    pools edit counts across the corpus.
    """
    if not pairs:
        raise MetricError("nothing to score")
    per_sample: dict[str, dict[str, float]] = {}
    sums = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0, "meteor": 0.0}
    total_edits = 0
    total_ref_words = 0
    for uid, hyp_text, ref_text in pairs:
        hyp = tokenize(hyp_text)
        ref = tokenize(ref_text)
        row = {
            "rouge1": rouge_n(hyp, ref, 1)[2],
            "rouge2": rouge_n(hyp, ref, 2)[2],
            "rougeL": rouge_l(hyp, ref)[2],
            "meteor": 100.0 * meteor(hyp, ref),
        }
        if include_wer:
            if not ref:
                raise MetricError(f"sample {uid}: empty reference for error-rate scoring")
            row["wer"] = wer(hyp, ref)
            total_edits += edit_distance(hyp, ref)
            total_ref_words += len(ref)
        per_sample[uid] = row
        for key in sums:
            sums[key] += row[key]
    n = len(pairs)
    return ScoreReport(
        n_samples=n,
        rouge1=sums["rouge1"] / n,
        rouge2=sums["rouge2"] / n,
        rougeL=sums["rougeL"] / n,
        meteor=sums["meteor"] / n,
        wer=(100.0 * total_edits / total_ref_words) if include_wer else None,
        per_sample=per_sample,
    )


def evaluate(hyp_path: str, ref_path: str, include_wer: bool = False) -> ScoreReport:
    """Score a hypothesis file against a reference file.

    Both are ``uid<TAB>text`` token files and must cover exactly the
    same ids.
    """
    hyps = read_token_file(hyp_path)
    refs = read_token_file(ref_path)
    if set(hyps) != set(refs):
        only_hyp = sorted(set(hyps) - set(refs))[:3]
        only_ref = sorted(set(refs) - set(hyps))[:3]
        raise MetricError(
            f"id mismatch between {hyp_path} and {ref_path}: "
            f"only in hypotheses {only_hyp}, only in references {only_ref}"
        )
    pairs = [(uid, hyps[uid], refs[uid]) for uid in sorted(hyps)]
    return score_pairs(pairs, include_wer=include_wer)
