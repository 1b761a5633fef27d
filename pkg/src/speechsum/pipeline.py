"""Orchestration of the whole experiment: corpus, pre-training,
fine-tuning, transplants, decoding, scoring, and the results tables.

Six systems are built and compared on the synthetic task:

  C-1  cascade: a recognizer's transcripts piped into a text summarizer
  B-1  speech summarizer initialized from the recognizer
  B-2  B-1 further fine-tuned on real plus synthetic-voice data
  P-1  B-1's encoder + text summarizer's decoder, then fine-tuned
  P-2  recognizer's encoder + text summarizer's decoder, then fine-tuned
  P-3  B-1's encoder + denoising LM's decoder, then fine-tuned

A Workspace owns one output directory and builds every artifact lazily:
checkpoints, decode outputs and reference files persist, so re-running
a table re-scores persisted decodes instead of repeating work. All
randomness derives from the plan seed, making same-seed runs
bit-reproducible.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from .data import (
    Corpus,
    CorpusConfig,
    LmNoiseConfig,
    generate_corpus,
    load_corpus,
    reference_file,
    save_corpus,
    subset,
    synth_augment,
    view,
)
from .decoding import BeamConfig, beam_search, strip_specials, write_decodes
from .metrics import ScoreReport, evaluate
from .model import ModelConfig, build_model
from .training import (
    SchedulerConfig,
    SpecAugmentConfig,
    TrainConfig,
    TrainingError,
    TrainLog,
    train_stage,
)
from .transfer import (
    build_variant,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)


class PipelineError(RuntimeError):
    """A stage could not run or a plan is malformed."""


SYSTEMS = ("C-1", "B-1", "B-2", "P-1", "P-2", "P-3")

# Scores a full-scale run of each recipe reaches (rouge1/2/L, then the
# unigram-harmonic metric). Kept for the qualitative ordering note the
# table prints; toy runs are not expected to reproduce them.
FULL_SCALE_REFERENCE = {
    "C-1": {"rouge1": 61.1, "rouge2": 43.3, "rougeL": 55.7, "meteor": 30.5},
    "B-1": {"rouge1": 64.9, "rouge2": 49.6, "rougeL": 60.8, "meteor": 33.0},
    "B-2": {"rouge1": 65.3, "rouge2": 50.7, "rougeL": 61.3, "meteor": 33.2},
    "P-1": {"rouge1": 67.0, "rouge2": 52.1, "rougeL": 63.2, "meteor": 34.4},
    "P-2": {"rouge1": 64.0, "rouge2": 48.4, "rougeL": 59.9, "meteor": 32.5},
    "P-3": {"rouge1": 67.0, "rouge2": 52.3, "rougeL": 63.2, "meteor": 34.2},
}

# stage key in the plan -> training stage it runs
_STAGE_OF = {
    "asr": "asr-pretrain",
    "lm": "lm-pretrain",
    "tsum": "tsum-finetune",
    "ssum": "ssum-finetune",
    "synth": "ssum-finetune",
    "transfer": "transfer-finetune",
}

_AUG_DEFAULT = {"time_masks": 2, "time_width": 8, "freq_masks": 1, "freq_width": 3}


def _stage_defaults(kind: str, epochs: int, scheduler: dict, augment: dict | None) -> dict:
    full_sched = {
        "kind": "constant", "lr": 1e-3, "peak_lr": 1e-3, "warmup_steps": 400,
        "factor": 0.5, "patience": 1, "total_epochs": 10,
    }
    full_sched.update(scheduler)
    return {
        "max_epochs": epochs,
        "batch_size": 8,
        "label_smoothing": 0.1,
        "weight_decay": 1e-6,
        "grad_clip": 5.0,
        "scheduler": full_sched,
        "augment": dict(augment) if augment else None,
    }


def default_plan() -> dict:
    """The complete experiment configuration with toy-scale defaults.

    Every key a config file may override appears here, so merging can
    reject typos instead of silently ignoring them.
    """
    corpus = CorpusConfig().to_dict()
    model = ModelConfig(vocab_size=1).to_dict()
    del model["vocab_size"]  # derived from the corpus vocabulary
    return {
        "seed": 0,
        "eval_split": "eval",
        "synth_limit": 1000,
        "corpus": corpus,
        "model": model,
        "lm_noise": {"mask_prob": 0.3, "swap_frac": 0.25},
        "beam": {"width": 8, "length_reward": 0.3, "max_len": 30, "end_detection": True},
        "stages": {
            "asr": _stage_defaults(
                "asr", 3, {"kind": "warmup", "peak_lr": 2e-3, "warmup_steps": 200}, _AUG_DEFAULT),
            "lm": _stage_defaults(
                "lm", 2, {"kind": "warmup", "peak_lr": 2e-3, "warmup_steps": 100}, None),
            "tsum": _stage_defaults("tsum", 2, {"kind": "constant", "lr": 1e-3}, None),
            "ssum": _stage_defaults(
                "ssum", 3, {"kind": "warmup", "peak_lr": 2e-3, "warmup_steps": 100}, _AUG_DEFAULT),
            "synth": _stage_defaults("synth", 2, {"kind": "constant", "lr": 5e-4}, _AUG_DEFAULT),
            "transfer": _stage_defaults("transfer", 2, {"kind": "constant", "lr": 1e-3}, _AUG_DEFAULT),
        },
    }


def merge_plan(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge an override dict onto a base plan, rejecting keys the
    base does not know."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise PipelineError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge_plan(out[key], value, path=where + ".")
        elif isinstance(out[key], dict) and value is not None:
            raise PipelineError(f"config key {where!r} expects a mapping or null")
        else:
            out[key] = copy.deepcopy(value)
    return out


def plan_digest(plan: dict) -> str:
    canon = json.dumps(plan, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _pct(fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise PipelineError(f"fraction must lie in (0, 1], got {fraction}")
    return int(round(fraction * 100))


@dataclass
class SystemResult:
    system: str
    fraction: float
    report: ScoreReport | None = None
    asr_wer: float | None = None
    checkpoint: str | None = None
    error: str | None = None
    seconds: float = 0.0


@dataclass
class TableResult:
    fraction: float
    digest: str
    results: list[SystemResult] = field(default_factory=list)
    seconds: float = 0.0
    text_path: str = ""
    machine_path: str = ""

    def result_for(self, system: str) -> SystemResult:
        for r in self.results:
            if r.system == system:
                return r
        raise KeyError(system)


class Workspace:
    """Everything one experiment run produces, rooted at one directory.

    Checkpoints, logs, decode outputs, references and tables are laid
    out under fixed subdirectories and reused when present.
    """

    def __init__(self, root: str, plan: dict | None = None):
        self.root = root
        self.plan = merge_plan(default_plan(), plan or {})
        self._validate_plan()
        self._corpus: Corpus | None = None
        for sub in ("corpus", "checkpoints", "decodes", "tables", "logs"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)

    def _validate_plan(self) -> None:
        if self.plan["model"]["feature_dim"] != self.plan["corpus"]["feature_dim"]:
            raise PipelineError(
                "model feature_dim must match the corpus feature_dim "
                f"({self.plan['model']['feature_dim']} vs {self.plan['corpus']['feature_dim']})"
            )
        if self.plan["eval_split"] not in Corpus.SPLIT_NAMES:
            raise PipelineError(f"unknown eval split {self.plan['eval_split']!r}")
        # fail fast on malformed stage configs
        for key in self.plan["stages"]:
            self._train_config(key, seed=0)
        self._beam_config()
        CorpusConfig.from_dict(self.plan["corpus"])
        LmNoiseConfig(**self.plan["lm_noise"]).validate()

    # ------------------------------------------------------------ config

    def digest(self) -> str:
        return plan_digest(self.plan)

    def corpus(self) -> Corpus:
        """Generate the corpus on first use; always read it back from
        disk so every code path sees the stored 32-bit features."""
        if self._corpus is None:
            corpus_dir = os.path.join(self.root, "corpus")
            cfg = CorpusConfig.from_dict(self.plan["corpus"])
            if not os.path.exists(os.path.join(corpus_dir, "corpus.json")):
                save_corpus(generate_corpus(cfg), corpus_dir)
            loaded = load_corpus(corpus_dir)
            if loaded.config != cfg:
                raise PipelineError(
                    f"corpus at {corpus_dir} was generated with a different config; "
                    "remove it or change the output directory"
                )
            self._corpus = loaded
        return self._corpus

    def model_config(self) -> ModelConfig:
        vocab = self.corpus().vocab
        return ModelConfig(vocab_size=len(vocab), **self.plan["model"]).validate()

    def _beam_config(self) -> BeamConfig:
        return BeamConfig(**self.plan["beam"]).validate()

    def _train_config(self, stage_key: str, seed: int) -> TrainConfig:
        raw = dict(self.plan["stages"][stage_key])
        sched = SchedulerConfig(**raw.pop("scheduler")).validate()
        aug_raw = raw.pop("augment")
        augment = SpecAugmentConfig(**aug_raw).validate() if aug_raw else None
        return TrainConfig(
            stage=_STAGE_OF[stage_key], scheduler=sched, augment=augment, seed=seed, **raw
        ).validate()

    def _stage_seed(self, tag: str, pct: int) -> int:
        offsets = {"asr": 1, "lm": 2, "tsum": 3, "b1": 4, "b2": 5,
                   "P-1": 6, "P-2": 7, "P-3": 8}
        return int(self.plan["seed"]) * 1_000_003 + offsets[tag] * 1009 + pct

    def _subset_seed(self, pct: int) -> int:
        return int(self.plan["seed"]) * 1009 + pct

    def _subset(self, samples: list, fraction: float) -> list:
        if fraction >= 1.0:
            return samples
        return subset(samples, fraction, self._subset_seed(_pct(fraction)))

    # ------------------------------------------------------- checkpoints

    def checkpoint_path(self, name: str) -> str:
        return os.path.join(self.root, "checkpoints", f"{name}.ckpt")

    def _run_training(self, model, train, val, stage_key: str, name: str, pct: int,
                      seed_tag: str) -> TrainLog:
        cfg = self._train_config(stage_key, seed=self._stage_seed(seed_tag, pct))
        log_path = os.path.join(self.root, "logs", f"{name}.tsv")
        try:
            log = train_stage(model, train, val, cfg)
        except TrainingError as exc:
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write(f"FAILED {cfg.stage}: {exc}\n")
            raise PipelineError(
                f"stage {cfg.stage} for {name} failed; log at {log_path}: {exc}"
            ) from exc
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(log.to_tsv())
        return log

    def _ensure(self, name: str, build) -> str:
        """Build and save a checkpoint unless it already exists."""
        path = self.checkpoint_path(name)
        if os.path.exists(path):
            return path
        model, role, log_digest, sources = build()
        save_checkpoint(path, model, role, train_log_digest=log_digest, sources=sources)
        return path

    def ensure_asr(self) -> str:
        def build():
            corpus = self.corpus()
            model = build_model("speech", self.model_config(), corpus.vocab,
                                seed=self._stage_seed("asr", 100))
            log = self._run_training(
                model, view(corpus, "asr", "train"), view(corpus, "asr", "val"),
                "asr", "asr", 100, "asr")
            return model, "asr", log.digest(), None
        return self._ensure("asr", build)

    def ensure_lm(self) -> str:
        def build():
            corpus = self.corpus()
            noise = LmNoiseConfig(**self.plan["lm_noise"]).validate()
            model = build_model("text", self.model_config(), corpus.vocab,
                                seed=self._stage_seed("lm", 100))
            log = self._run_training(
                model,
                view(corpus, "lm", "train", noise=noise),
                view(corpus, "lm", "val", noise=noise),
                "lm", "lm", 100, "lm")
            return model, "lm", log.digest(), None
        return self._ensure("lm", build)

    def ensure_tsum(self, fraction: float = 1.0) -> str:
        pct = _pct(fraction)
        name = f"tsum-f{pct:03d}"

        def build():
            corpus = self.corpus()
            init = load_checkpoint(self.ensure_lm())
            model = init.build_model()
            train = self._subset(view(corpus, "tsum", "train"), fraction)
            log = self._run_training(
                model, train, view(corpus, "tsum", "val"), "tsum", name, pct, "tsum")
            return model, "tsum", log.digest(), {"init": init.file_sha}
        return self._ensure(name, build)

    def ensure_b1(self, fraction: float = 1.0) -> str:
        pct = _pct(fraction)
        name = f"b1-f{pct:03d}"

        def build():
            corpus = self.corpus()
            init = load_checkpoint(self.ensure_asr())
            model = init.build_model()
            train = self._subset(view(corpus, "ssum", "train"), fraction)
            log = self._run_training(
                model, train, view(corpus, "ssum", "val"), "ssum", name, pct, "b1")
            return model, "ssum", log.digest(), {"init": init.file_sha}
        return self._ensure(name, build)

    def ensure_b2(self, fraction: float = 1.0) -> str:
        pct = _pct(fraction)
        name = f"b2-f{pct:03d}"

        def build():
            corpus = self.corpus()
            init = load_checkpoint(self.ensure_b1(fraction))
            model = init.build_model()
            real = self._subset(view(corpus, "ssum", "train"), fraction)
            limit = self.plan["synth_limit"]
            train = real + synth_augment(corpus, limit=limit)
            log = self._run_training(
                model, train, view(corpus, "ssum", "val"), "synth", name, pct, "b2")
            return model, "ssum", log.digest(), {"init": init.file_sha}
        return self._ensure(name, build)

    _VARIANT_TAG = {"P-1": "p1", "P-2": "p2", "P-3": "p3"}

    def ensure_raw_variant(self, system: str, fraction: float = 1.0) -> str:
        """The transplanted model exactly as assembled, before any
        fine-tuning. Persisted so the bit-copy is auditable."""
        if system not in self._VARIANT_TAG:
            raise PipelineError(f"no transplant recipe for {system!r}")
        pct = _pct(fraction)
        name = f"{self._VARIANT_TAG[system]}-raw-f{pct:03d}"

        def build():
            if system == "P-1":
                paths = {"ssum": self.ensure_b1(fraction), "tsum": self.ensure_tsum(fraction)}
            elif system == "P-2":
                paths = {"asr": self.ensure_asr(), "tsum": self.ensure_tsum(fraction)}
            else:
                paths = {"ssum": self.ensure_b1(fraction), "lm": self.ensure_lm()}
            model, sources = build_variant(system, paths)
            sources["variant"] = system
            return model, "transferred", None, sources
        return self._ensure(name, build)

    def ensure_variant(self, system: str, fraction: float = 1.0) -> str:
        pct = _pct(fraction)
        name = f"{self._VARIANT_TAG[system]}-f{pct:03d}"

        def build():
            corpus = self.corpus()
            raw = load_checkpoint(self.ensure_raw_variant(system, fraction))
            model = raw.build_model()
            train = self._subset(view(corpus, "ssum", "train"), fraction)
            log = self._run_training(
                model, train, view(corpus, "ssum", "val"), "transfer", name, pct, system)
            sources = dict(raw.sources or {})
            sources["init"] = raw.file_sha
            return model, "transferred", log.digest(), sources
        return self._ensure(name, build)

    # ---------------------------------------------------------- decoding

    def _decode_path(self, tag: str) -> str:
        return os.path.join(self.root, "decodes", f"{tag}.tsv")

    def reference_path(self, what: str = "summary") -> str:
        split = self.plan["eval_split"]
        path = self._decode_path(f"refs-{split}-{what}")
        if not os.path.exists(path):
            reference_file(self.corpus(), split, path, what=what)
        return path

    def _decode_to_file(self, model, items: list[tuple[str, object]], path: str) -> None:
        """items: (uid, source) pairs; best beam hypothesis per item."""
        beam = self._beam_config()
        rows = []
        for uid, source in items:
            hyps = beam_search(model, source, beam)
            rows.append((uid, strip_specials(hyps[0].tokens)))
        tmp = path + ".part"
        write_decodes(tmp, rows, model.vocab)
        os.replace(tmp, path)

    def decode_system(self, system: str, fraction: float = 1.0) -> str:
        """Decode the evaluation split for one system; returns the
        decode file path. Existing files are reused verbatim."""
        pct = _pct(fraction)
        tag = f"{system}-f{pct:03d}"
        path = self._decode_path(tag)
        self.reference_path("summary")
        if system == "C-1":
            self.reference_path("transcript")
        if os.path.exists(path):
            return path
        corpus = self.corpus()
        split = self.plan["eval_split"]
        if system == "C-1":
            self._decode_cascade(pct, path)
        else:
            if system == "B-1":
                ckpt = self.ensure_b1(fraction)
            elif system == "B-2":
                ckpt = self.ensure_b2(fraction)
            elif system in self._VARIANT_TAG:
                ckpt = self.ensure_variant(system, fraction)
            else:
                raise PipelineError(f"unknown system {system!r}")
            model = load_checkpoint(ckpt).build_model()
            items = [(t.uid, t.features) for t in corpus.splits[split]]
            self._decode_to_file(model, items, path)
        return path

    def _decode_cascade(self, pct: int, out_path: str) -> None:
        """Recognize the evaluation speech, then summarize the
        transcripts with the text summarizer."""
        fraction = pct / 100.0
        corpus = self.corpus()
        split = self.plan["eval_split"]
        asr_path = self._decode_path(f"C-1-f{pct:03d}-asr")
        if not os.path.exists(asr_path):
            asr_model = load_checkpoint(self.ensure_asr()).build_model()
            items = [(t.uid, t.features) for t in corpus.splits[split]]
            self._decode_to_file(asr_model, items, asr_path)
        tsum_model = load_checkpoint(self.ensure_tsum(fraction)).build_model()
        vocab = tsum_model.vocab
        beam = self._beam_config()
        rows = []
        from .metrics import read_token_file

        transcripts = read_token_file(asr_path)
        for t in corpus.splits[split]:
            words = transcripts.get(t.uid, "").split()
            ids = vocab.encode(words)
            if not ids:
                rows.append((t.uid, []))
                continue
            hyps = beam_search(tsum_model, ids, beam)
            rows.append((t.uid, strip_specials(hyps[0].tokens)))
        tmp = out_path + ".part"
        write_decodes(tmp, rows, vocab)
        os.replace(tmp, out_path)

    # ----------------------------------------------------------- scoring

    def run_system(self, system: str, fraction: float = 1.0) -> SystemResult:
        if system not in SYSTEMS:
            raise PipelineError(f"unknown system {system!r}; expected one of {SYSTEMS}")
        t0 = time.time()
        pct = _pct(fraction)
        decode_path = self.decode_system(system, fraction)
        report = evaluate(decode_path, self.reference_path("summary"))
        result = SystemResult(system=system, fraction=fraction, report=report)
        if system == "C-1":
            asr_path = self._decode_path(f"C-1-f{pct:03d}-asr")
            asr_report = evaluate(asr_path, self.reference_path("transcript"),
                                  include_wer=True)
            result.asr_wer = asr_report.wer
        else:
            name = {"B-1": f"b1-f{pct:03d}", "B-2": f"b2-f{pct:03d}"}.get(
                system, f"{self._VARIANT_TAG.get(system, '?')}-f{pct:03d}")
            result.checkpoint = file_digest(self.checkpoint_path(name))
        result.seconds = time.time() - t0
        return result

    # ------------------------------------------------------------ tables

    def run_table(self, fraction: float = 1.0,
                  systems: tuple = SYSTEMS) -> TableResult:
        """Build, decode and score every requested system; failures are
        recorded per system and do not stop the rest."""
        t0 = time.time()
        pct = _pct(fraction)
        table = TableResult(fraction=fraction, digest=self.digest())
        for system in systems:
            try:
                table.results.append(self.run_system(system, fraction))
            except Exception as exc:  # noqa: BLE001  (table must survive)
                msg = f"{type(exc).__name__}: {exc}".replace(self.root, "<out>")
                table.results.append(
                    SystemResult(system=system, fraction=fraction, error=msg))
        table.seconds = time.time() - t0
        table.text_path = os.path.join(self.root, "tables", f"table-f{pct:03d}.txt")
        table.machine_path = os.path.join(self.root, "tables", f"table-f{pct:03d}.kv")
        with open(table.text_path, "w", encoding="utf-8") as fh:
            fh.write(format_table_text(table, self))
        with open(table.machine_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(machine_lines(table)) + "\n")
        return table

    def run_sweep(self, fractions: tuple = (0.25, 0.5, 1.0),
                  systems: tuple = SYSTEMS) -> list[TableResult]:
        """One table per training-data fraction, plus a note on how the
        scores move with the fraction (reported, never asserted)."""
        tables = [self.run_table(f, systems=systems) for f in sorted(fractions)]
        note_path = os.path.join(self.root, "tables", "sweep.txt")
        with open(note_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sweep_note(tables)) + "\n")
        return tables


# ------------------------------------------------------------- reporting


def _score_or_dash(result: SystemResult, col: str) -> str:
    if result.report is None:
        return "-".rjust(7)
    return f"{getattr(result.report, col):7.2f}"


def format_table_text(table: TableResult, workspace: Workspace | None = None) -> str:
    lines = [f"{'system':<8}{'rouge1':>8}{'rouge2':>8}{'rougeL':>8}{'meteor':>8}{'asr_wer':>9}"]
    for r in table.results:
        if r.error is not None:
            lines.append(f"{r.system:<8}FAILED: {r.error}")
            continue
        wer = f"{r.asr_wer:8.2f}" if r.asr_wer is not None else "-".rjust(8)
        lines.append(
            f"{r.system:<8}"
            + "".join(f" {_score_or_dash(r, c)}" for c in ScoreReport.COLUMNS)
            + f" {wer}"
        )
    lines.append("")
    lines.append(f"fraction: {table.fraction:.2f}")
    lines.append(f"config digest: {table.digest}")
    if workspace is not None:
        cfg = workspace.corpus().config
        lines.append(f"corpus: train={cfg.n_train} val={cfg.n_val} eval={cfg.n_eval}")
    lines.append(f"runtime: {table.seconds:.1f}s")
    lines.append("")
    lines.extend(ordering_note(table))
    return "\n".join(lines) + "\n"


def machine_lines(table: TableResult) -> list[str]:
    """key=value form of a table. Deliberately excludes wall-clock time
    and absolute paths so same-seed runs emit identical bytes."""
    lines = [
        f"fraction={table.fraction:.6f}",
        f"config_digest={table.digest}",
        "systems=" + ",".join(r.system for r in table.results),
    ]
    for r in table.results:
        prefix = f"{r.system}."
        if r.error is not None:
            lines.append(f"{prefix}error={' '.join(r.error.split())}")
            continue
        lines.extend(r.report.machine_lines(prefix))
        if r.asr_wer is not None:
            lines.append(f"{prefix}asr_wer={r.asr_wer:.6f}")
        if r.checkpoint is not None:
            lines.append(f"{prefix}checkpoint={r.checkpoint}")
    return lines


def ordering_note(table: TableResult) -> list[str]:
    """Compare this run's system ordering with the full-scale reference
    ordering. Informational only; toy dynamics may differ."""
    scored = {r.system: r.report.meteor for r in table.results if r.report is not None}
    if len(scored) < 2:
        return ["ordering note: not enough scored systems to compare"]
    ref = {s: FULL_SCALE_REFERENCE[s]["meteor"] for s in scored}
    toy_order = sorted(scored, key=lambda s: -scored[s])
    ref_order = sorted(ref, key=lambda s: -ref[s])
    pairs_total = 0
    pairs_agree = 0
    names = sorted(scored)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pairs_total += 1
            if (scored[a] - scored[b]) * (ref[a] - ref[b]) > 0:
                pairs_agree += 1
    return [
        "ordering note (not a pass/fail check):",
        f"  full-scale reference, best to worst: {' > '.join(ref_order)}",
        f"  this run,             best to worst: {' > '.join(toy_order)}",
        f"  pairwise agreement with the reference: {pairs_agree}/{pairs_total}",
    ]


def sweep_note(tables: list[TableResult]) -> list[str]:
    """Describe how each system's scores move as the training fraction
    grows. Monotonic growth is typical but never required."""
    lines = ["score vs training-data fraction (reported, not asserted):"]
    fractions = [t.fraction for t in tables]
    systems = [r.system for r in tables[0].results]
    for system in systems:
        scores = []
        for t in tables:
            try:
                r = t.result_for(system)
            except KeyError:
                r = None
            scores.append(None if r is None or r.report is None else r.report.meteor)
        if any(s is None for s in scores):
            lines.append(f"  {system}: incomplete ({scores})")
            continue
        shown = ", ".join(f"f={f:.2f}: {s:.2f}" for f, s in zip(fractions, scores))
        trend = "non-decreasing" if all(
            a <= b + 1e-9 for a, b in zip(scores, scores[1:])) else "not monotonic"
        lines.append(f"  {system}: {shown}  [{trend}]")
    return lines
