"""Optimization: loss, Adam, learning-rate schedules, augmentation and
the per-stage training loop.

A training stage is one (model, dataset, schedule) combination; the
pipeline chains stages. The loop is deliberately simple: per-sample
forward passes (sequences are never padded into rectangles), batch loss
as the mean of sample losses, one optimizer step per batch, validation
after every epoch, and the best-validation-accuracy parameters restored
at the end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STAGES = ("asr-pretrain", "lm-pretrain", "ssum-finetune", "tsum-finetune", "transfer-finetune")

# Stages whose source is frame features; only these may use masking
# augmentation, and only while training.
SPEECH_STAGES = ("asr-pretrain", "ssum-finetune", "transfer-finetune")

LOG_PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """Training could not proceed (bad config, divergence, NaN)."""


class SchedulerError(ValueError):
    """A scheduler was queried without the inputs its kind needs."""


# ---------------------------------------------------------------- loss


def label_smoothed_ce(dists: Tensor, target_ids, epsilon: float, pad_id: int | None = None) -> Tensor:
    """Cross entropy against a label-smoothed target distribution.

    The target at each position puts 1 - epsilon on the gold token plus
    a uniform epsilon / K everywhere, and the loss is averaged over
    non-padding positions. Predicted probabilities are floored at 1e-12
    inside the log. Against a uniform prediction the loss is exactly
    ln K for any epsilon, which the tests pin down.
    """
    if not 0.0 <= epsilon < 1.0:
        raise TrainingError(f"label smoothing must lie in [0, 1), got {epsilon}")
    targets = list(target_ids)
    if dists.ndim != 2 or dists.shape[0] != len(targets):
        raise ad.ShapeError(
            f"need one distribution row per target, got {dists.shape} vs {len(targets)} targets"
        )
    n_classes = dists.shape[1]
    if any(not 0 <= t < n_classes for t in targets):
        raise TrainingError("target id out of range")
    keep = [i for i, t in enumerate(targets) if pad_id is None or t != pad_id]
    if not keep:
        raise TrainingError("every target position is padding")
    smooth = np.full((len(keep), n_classes), epsilon / n_classes)
    smooth[np.arange(len(keep)), [targets[i] for i in keep]] += 1.0 - epsilon
    rows = ad.take_rows(dists, np.asarray(keep)) if len(keep) != len(targets) else dists
    log_p = ad.log(ad.clamp_min(rows, LOG_PROB_FLOOR))
    return ad.mul(ad.sum_all(ad.mul(log_p, Tensor(smooth))), -1.0 / len(keep))


# ---------------------------------------------------------------- adam


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with decoupled weight decay.

    Decay multiplies parameters by (1 - lr * weight_decay) before the
    moment-based update, so decay strength follows the learning rate but
    never leaks into the moment statistics. A parameter with zero
    gradient and zero decay is left bit-identical.
    """
    if lr < 0 or weight_decay < 0:
        raise TrainingError("learning rate and weight decay must be non-negative")
    missing = set(params) - set(grads)
    if missing:
        raise TrainingError(f"gradient map is missing {sorted(missing)[:3]}")
    state.step += 1
    t = state.step
    for name, param in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if g.shape != param.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match {name} {param.shape}")
        if weight_decay:
            param.data *= 1.0 - lr * weight_decay
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient map so its global L2 norm is at most
    ``max_norm``. Returns the pre-clip norm."""
    if max_norm <= 0:
        raise TrainingError("clip norm must be positive")
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# ----------------------------------------------------------- schedulers


@dataclass
class SchedulerConfig:
    """One scheduler description; fields beyond the chosen kind's are
    ignored. Kinds: warmup (inverse-sqrt decay after a linear warmup),
    plateau (halve when validation stalls), linear (to zero over the
    stage), constant."""

    kind: str = "constant"
    lr: float = 1e-3               # plateau / linear / constant start rate
    peak_lr: float = 1e-3          # warmup peak
    warmup_steps: int = 400
    factor: float = 0.5            # plateau shrink factor
    patience: int = 1              # plateau: tolerated non-improving validations
    total_epochs: int = 10         # linear: epochs until zero

    def validate(self) -> "SchedulerConfig":
        if self.kind not in ("warmup", "plateau", "linear", "constant"):
            raise SchedulerError(f"unknown scheduler kind {self.kind!r}")
        if self.kind == "warmup" and (self.peak_lr <= 0 or self.warmup_steps < 1):
            raise SchedulerError("warmup scheduler needs peak_lr > 0 and warmup_steps >= 1")
        if self.kind != "warmup" and self.lr <= 0:
            raise SchedulerError("scheduler needs a positive starting rate")
        if self.kind == "plateau" and not (0 < self.factor < 1 and self.patience >= 0):
            raise SchedulerError("plateau scheduler needs factor in (0,1) and patience >= 0")
        if self.kind == "linear" and self.total_epochs < 1:
            raise SchedulerError("linear scheduler needs total_epochs >= 1")
        return self


@dataclass
class SchedulerState:
    config: SchedulerConfig
    current_lr: float = 0.0
    best_metric: float = float("inf")
    bad_count: int = 0

    @classmethod
    def create(cls, config: SchedulerConfig) -> "SchedulerState":
        config.validate()
        start = config.peak_lr if config.kind == "warmup" else config.lr
        return cls(config=config, current_lr=start)


def scheduler_lr(state: SchedulerState, step: int | None = None, epoch: int | None = None,
                 validation_metric: float | None = None) -> float:
    """Learning rate for the next update(s); mutates plateau state.

    warmup: needs ``step`` (1-based optimizer step).
    linear: needs ``epoch`` (0-based).
    plateau: needs ``validation_metric`` from every epoch after the
    first; an improvement resets the stall counter, and once the counter
    exceeds the patience the rate shrinks by the configured factor.
    """
    cfg = state.config
    if cfg.kind == "warmup":
        if step is None or step < 1:
            raise SchedulerError("warmup scheduler needs a 1-based step index")
        rate = cfg.peak_lr * min(step / cfg.warmup_steps, np.sqrt(cfg.warmup_steps / step))
        state.current_lr = float(rate)
    elif cfg.kind == "linear":
        if epoch is None or epoch < 0:
            raise SchedulerError("linear scheduler needs a 0-based epoch index")
        state.current_lr = cfg.lr * max(0.0, 1.0 - epoch / cfg.total_epochs)
    elif cfg.kind == "plateau":
        if validation_metric is not None:
            if validation_metric < state.best_metric:
                state.best_metric = validation_metric
                state.bad_count = 0
            else:
                state.bad_count += 1
                if state.bad_count > cfg.patience:
                    state.current_lr *= cfg.factor
                    state.bad_count = 0
        elif epoch not in (None, 0):
            raise SchedulerError("plateau scheduler needs the validation metric after epoch 0")
    return state.current_lr


# --------------------------------------------------------- augmentation


@dataclass
class SpecAugmentConfig:
    """Zero out random time spans and feature bands of a feature matrix.

    Each mask's width is drawn uniformly from 0..max width, so with
    ``time_masks`` masks of width at most ``time_width`` no more than
    time_masks * time_width frames are zeroed (masks may overlap).
    """

    time_masks: int = 2
    time_width: int = 10
    freq_masks: int = 2
    freq_width: int = 4

    def validate(self) -> "SpecAugmentConfig":
        if min(self.time_masks, self.time_width, self.freq_masks, self.freq_width) < 0:
            raise TrainingError("augmentation counts and widths must be non-negative")
        return self


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise TrainingError("masking augmentation needs a (frames, features) matrix")
    out = feats.copy()
    n_frames, n_feats = out.shape
    for _ in range(cfg.time_masks):
        width = int(rng.integers(0, min(cfg.time_width, n_frames) + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(cfg.freq_masks):
        width = int(rng.integers(0, min(cfg.freq_width, n_feats) + 1))
        start = int(rng.integers(0, n_feats - width + 1))
        out[:, start:start + width] = 0.0
    return out


# ------------------------------------------------------------- batching


def make_batches(samples: list, batch_size: int, rng: np.random.Generator) -> list[list]:
    """Shuffled batches that never mix real and artificial samples.

    Real and artificial samples are shuffled and chunked separately and
    the combined batch order is shuffled again, so a mixed corpus yields
    interleaved but internally pure batches.
    """
    if batch_size < 1:
        raise TrainingError("batch size must be at least 1")
    if not samples:
        raise TrainingError("cannot batch an empty sample list")
    batches: list[list] = []
    for group_flag in (False, True):
        group = [s for s in samples if bool(s.artificial) == group_flag]
        if not group:
            continue
        order = rng.permutation(len(group))
        for lo in range(0, len(group), batch_size):
            batches.append([group[i] for i in order[lo:lo + batch_size]])
    batches = [batches[i] for i in rng.permutation(len(batches))]
    for batch in batches:
        flags = {bool(s.artificial) for s in batch}
        if len(flags) != 1:
            raise TrainingError("internal error: mixed batch assembled")
    return batches


# ------------------------------------------------------------ the loop


@dataclass
class TrainConfig:
    stage: str
    max_epochs: int = 10
    batch_size: int = 8
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    label_smoothing: float = 0.1
    weight_decay: float = 1e-6
    grad_clip: float = 5.0
    augment: SpecAugmentConfig | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise TrainingError("max_epochs and batch_size must be positive")
        if self.augment is not None:
            if self.stage not in SPEECH_STAGES:
                raise TrainingError(f"stage {self.stage} takes token input; masking augmentation needs features")
            self.augment.validate()
        self.scheduler.validate()
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainingError("label_smoothing must lie in [0, 1)")
        return self


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float
    untouched_params: int


@dataclass
class TrainLog:
    """Per-epoch records for one stage; TSV-serializable.

    ``digest`` covers only run-deterministic columns (wall time is
    excluded) so two identical runs hash identically.
    """

    stage: str
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    HEADER = "epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\tseconds\tuntouched_params"

    def to_tsv(self) -> str:
        lines = [self.HEADER]
        for e in self.epochs:
            lines.append(
                f"{e.epoch}\t{e.lr:.8e}\t{e.train_loss:.10f}\t{e.val_loss:.10f}"
                f"\t{e.val_accuracy:.6f}\t{e.seconds:.2f}\t{e.untouched_params}"
            )
        lines.append(f"# best_epoch\t{self.best_epoch}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        import hashlib

        rows = [
            f"{e.epoch}|{e.lr:.8e}|{e.train_loss:.10f}|{e.val_loss:.10f}|{e.val_accuracy:.6f}"
            for e in self.epochs
        ]
        blob = f"{self.stage}|{self.best_epoch}|" + ";".join(rows)
        return hashlib.sha256(blob.encode()).hexdigest()


def _sample_loss(model, sample, epsilon: float, augment, aug_rng) -> Tensor:
    source = sample.source
    if augment is not None:
        source = spec_augment(source, augment, aug_rng)
    dists = model.teacher_forced(source, sample.target)
    return label_smoothed_ce(dists, sample.target, epsilon)


def evaluate_teacher_forced(model, samples: list, epsilon: float) -> tuple[float, float]:
    """Mean smoothed loss and pooled next-token argmax accuracy."""
    if not samples:
        raise TrainingError("cannot evaluate on an empty sample list")
    total_loss = 0.0
    hits = 0
    positions = 0
    for sample in samples:
        dists = model.teacher_forced(sample.source, sample.target)
        total_loss += label_smoothed_ce(dists, sample.target, epsilon).item()
        pred = np.argmax(dists.data, axis=-1)
        hits += int((pred == np.asarray(sample.target)).sum())
        positions += len(sample.target)
    return total_loss / len(samples), hits / positions


def train_stage(model, train_samples: list, val_samples: list, cfg: TrainConfig) -> TrainLog:
    """Run one stage to completion and leave the model holding the
    parameters of its best validation epoch.

    Raises ``TrainingError`` naming the stage if the loss or any
    gradient turns non-finite.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise TrainingError(f"stage {cfg.stage} needs non-empty train and validation sets")
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed + 7919)
    sched = SchedulerState.create(cfg.scheduler)
    adam = AdamState()
    log = TrainLog(stage=cfg.stage)
    best_accuracy = -1.0
    best_arrays: dict[str, np.ndarray] | None = None
    last_val_loss: float | None = None
    global_step = 0
    warmup = cfg.scheduler.kind == "warmup"
    for epoch in range(cfg.max_epochs):
        started = time.monotonic()
        if not warmup:
            epoch_lr = scheduler_lr(sched, epoch=epoch, validation_metric=last_val_loss)
        untouched = set(model.params)
        epoch_loss = 0.0
        batches = make_batches(train_samples, cfg.batch_size, rng)
        for batch in batches:
            global_step += 1
            lr = scheduler_lr(sched, step=global_step) if warmup else epoch_lr
            try:
                with ad.Tape() as tape:
                    model.watch_all(tape)
                    total = None
                    for sample in batch:
                        part = _sample_loss(model, sample, cfg.label_smoothing, cfg.augment, aug_rng)
                        total = part if total is None else ad.add(total, part)
                    loss = ad.mul(total, 1.0 / len(batch))
                    grads = tape.gradients(loss)
                    named = {name: grads[t.node] for name, t in model.params.items()}
                    epoch_loss += loss.item() * len(batch)
            except ad.NonFiniteError as exc:
                raise TrainingError(
                    f"stage {cfg.stage} diverged at epoch {epoch}, step {global_step}: {exc}"
                ) from exc
            clip_gradients(named, cfg.grad_clip)
            for name, g in named.items():
                if name in untouched and np.any(g):
                    untouched.discard(name)
            adam_step(model.params, named, adam, lr, cfg.weight_decay)
        val_loss, val_accuracy = evaluate_teacher_forced(model, val_samples, cfg.label_smoothing)
        last_val_loss = val_loss
        log.epochs.append(EpochStats(
            epoch=epoch,
            lr=sched.current_lr if warmup else epoch_lr,
            train_loss=epoch_loss / len(train_samples),
            val_loss=val_loss,
            val_accuracy=val_accuracy,
            seconds=time.monotonic() - started,
            untouched_params=len(untouched),
        ))
        if val_accuracy > best_accuracy:
            best_accuracy = val_accuracy
            best_arrays = model.param_arrays()
            log.best_epoch = epoch
    if best_arrays is not None:
        model.load_param_arrays(best_arrays)
    return log
