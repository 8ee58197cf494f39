"""Supervised fine-tuning: teacher-forced next-scale cross-entropy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Triplet, augment_content, augment_style
from .model import StyleVAR
from .optim import AdamWState, adamw_step, clip_global_norm
from .tokenizer import MultiScaleTokenizer


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SftConfig:
    epochs: int = 10
    # (first epoch, lr) breakpoints; each lr holds until the next breakpoint
    lr_schedule: Tuple[Tuple[int, float], ...] = ((0, 5e-4), (6, 1e-4))
    batch_size: int = 8
    grad_accum: int = 1
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.95)
    augment: bool = True
    seed: int = 0
    max_steps: Optional[int] = None
    target_accuracy: Optional[float] = None   # stop early once train acc reaches this
    val_every: int = 1                        # epochs between validation passes

    def __post_init__(self):
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        epochs = [e for e, _ in self.lr_schedule]
        if epochs != sorted(set(epochs)):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")


def lr_at(epoch: int, schedule: Sequence[Tuple[int, float]]) -> float:
    """Piecewise-constant lr; epochs past the last breakpoint keep its value."""
    lr = schedule[0][1]
    for start, value in schedule:
        if epoch >= start:
            lr = value
    return float(lr)


@dataclass
class Batch:
    target_inputs: np.ndarray   # (B, L, d)
    targets: np.ndarray         # (B, L) token ids
    content_images: np.ndarray  # (B, H, W, 3)
    style_rows: np.ndarray      # (B, L, d)
    content_rows: np.ndarray    # (B, L, d)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "Batch":
        return Batch(*(a[idx] for a in (self.target_inputs, self.targets, self.content_images,
                                         self.style_rows, self.content_rows)))


class BatchBuilder:
    """Tokenizes triplets into model inputs; target tokens are cached since they never change."""

    def __init__(self, tokenizer: MultiScaleTokenizer):
        self.tok = tokenizer
        self._target_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self._cond_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def _target(self, t: Triplet):
        hit = self._target_cache.get(t.seed)
        if hit is None:
            h = self.tok.tokenize(t.target)
            hit = self._target_cache[t.seed] = (self.tok.next_scale_inputs(h), h.flat())
        return hit

    def _conditions(self, content, style):
        return (self.tok.condition_inputs(self.tok.tokenize(style)),
                self.tok.condition_inputs(self.tok.tokenize(content)))

    def build(self, triplets: Sequence[Triplet], aug_rngs: Optional[Sequence[np.random.Generator]] = None) -> Batch:
        ti, tg, ci, sr, cr = [], [], [], [], []
        for i, t in enumerate(triplets):
            inp, flat = self._target(t)
            if aug_rngs is None:
                hit = self._cond_cache.get(t.seed)
                if hit is None:
                    hit = self._cond_cache[t.seed] = self._conditions(t.content, t.style)
                content, (s_rows, c_rows) = t.content, hit
            else:
                rng = aug_rngs[i]
                content = augment_content(t.content, rng)
                style = augment_style(t.style, rng)
                s_rows, c_rows = self._conditions(content, style)
            ti.append(inp); tg.append(flat); ci.append(content); sr.append(s_rows); cr.append(c_rows)
        return Batch(np.stack(ti), np.stack(tg), np.stack(ci), np.stack(sr), np.stack(cr))


def sft_loss(model: StyleVAR, batch: Batch, normalizer: Optional[int] = None) -> Tuple[ad.Tensor, float, int]:
    """Summed token cross-entropy divided by ``normalizer`` (default: tokens in ``batch``).

    Returns ``(loss, n_correct, n_tokens)``.
    """
    # base weights only: SFT never trains adapters
    logits = model.forward(batch.target_inputs, batch.content_images, batch.style_rows,
                           batch.content_rows, mode="reference")
    n_tok = batch.targets.size
    ce = ad.cross_entropy(logits, batch.targets, reduction="sum")
    loss = ce / float(normalizer or n_tok)
    correct = float((logits.data.argmax(axis=-1) == batch.targets).sum())
    return loss, correct, n_tok


def accumulate_gradients(model: StyleVAR, micro_batches: Sequence[Batch],
                         deterministic: bool = False) -> Tuple[float, float]:
    """Backprop the mean token loss over all micro-batches, summing gradients in place.

    In deterministic mode every sample is processed on its own and gradients
    are summed in canonical sample order, so the result is bit-identical for
    any split of the same samples into micro-batches.
    """
    total_tokens = sum(b.targets.size for b in micro_batches)
    loss_sum, correct = 0.0, 0.0
    pieces = micro_batches
    if deterministic:
        pieces = [b.subset(slice(i, i + 1)) for b in micro_batches for i in range(len(b))]
    for piece in pieces:
        loss, c, _ = sft_loss(model, piece, normalizer=total_tokens)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite SFT loss {float(loss.data)}")
        loss.backward()
        loss_sum += float(loss.data)
        correct += c
    return loss_sum, correct / total_tokens


def sft_step(model: StyleVAR, opt: AdamWState, micro_batches: Sequence[Batch], lr: float,
             grad_clip: float = 1.0, deterministic: bool = False) -> Tuple[float, float, float]:
    """One optimizer step. Returns ``(loss, accuracy, pre-clip grad norm)``."""
    params = model.named_parameters()
    model.zero_grad()
    loss, acc = accumulate_gradients(model, micro_batches, deterministic)
    for name, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    norm = clip_global_norm(params, grad_clip)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm {norm}")
    adamw_step(params, opt, lr)
    return loss, acc, norm


def evaluate_loss(model: StyleVAR, builder: BatchBuilder, triplets: Sequence[Triplet],
                  batch_size: int = 16) -> Tuple[float, float]:
    """Mean token CE and accuracy without augmentation or gradients."""
    tot, correct, n = 0.0, 0.0, 0
    with ad.no_grad():
        for i in range(0, len(triplets), batch_size):
            loss, c, k = sft_loss(model, builder.build(triplets[i:i + batch_size]), normalizer=1)
            tot += float(loss.data)
            correct += c
            n += k
    return tot / n, correct / n


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, epoch])).permutation(n)


def augmentation_rngs(seed: int, step: int, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(np.random.SeedSequence([seed, 7, step, i])) for i in range(count)]


LOG_FIELDS = ("step", "epoch", "lr", "loss", "acc", "grad_norm", "val_loss", "val_acc")


@dataclass
class SftProgress:
    step: int = 0
    epoch: int = 0
    position: int = 0                 # index into this epoch's order
    best_val: float = float("inf")
    history: List[Dict[str, float]] = field(default_factory=list)

    def to_meta(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "position": self.position,
                "best_val": None if math.isinf(self.best_val) else self.best_val}

    @classmethod
    def from_meta(cls, d: dict) -> "SftProgress":
        bv = d.get("best_val")
        return cls(d["step"], d["epoch"], d["position"], float("inf") if bv is None else bv)


def run_sft(model: StyleVAR, tokenizer: MultiScaleTokenizer, train: Sequence[Triplet],
            val: Sequence[Triplet], cfg: SftConfig, deterministic: bool = False,
            opt: Optional[AdamWState] = None, progress: Optional[SftProgress] = None,
            log_path=None, checkpoint: Optional[Callable[[str, AdamWState, SftProgress], None]] = None,
            on_step: Optional[Callable[[Dict[str, float]], None]] = None) -> Tuple[AdamWState, SftProgress]:
    """Train until ``cfg.epochs``, ``cfg.max_steps`` or ``cfg.target_accuracy``.

    All randomness derives from ``(cfg.seed, epoch, step)``, so resuming from
    a saved ``(opt, progress)`` replays exactly the same batches. The
    ``checkpoint(tag, opt, progress)`` callback is invoked with ``"best"`` on
    a new best validation loss and ``"final"`` at the end.
    """
    if not train:
        raise ValueError("run_sft needs at least one training triplet")
    opt = opt or AdamWState(betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    progress = progress or SftProgress()
    builder = BatchBuilder(tokenizer)
    per_step = cfg.batch_size * cfg.grad_accum
    log = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = progress.step == 0 or not log_path.exists()
        log = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_FIELDS)
    try:
        done = False
        while progress.epoch < cfg.epochs and not done:
            if cfg.max_steps is not None and progress.step >= cfg.max_steps:
                break
            epoch = progress.epoch
            order = epoch_order(cfg.seed, epoch, len(train))
            lr = lr_at(epoch, cfg.lr_schedule)
            idx = order[progress.position:progress.position + per_step]
            items = [train[i] for i in idx]
            rngs = augmentation_rngs(cfg.seed, progress.step, len(items)) if cfg.augment else None
            full = builder.build(items, rngs)
            micro = [full.subset(slice(i, i + cfg.batch_size)) for i in range(0, len(full), cfg.batch_size)]
            loss, acc, norm = sft_step(model, opt, micro, lr, cfg.grad_clip, deterministic)
            progress.step += 1
            progress.position += len(idx)
            row = {"step": progress.step, "epoch": epoch, "lr": lr, "loss": loss,
                   "acc": acc, "grad_norm": norm, "val_loss": "", "val_acc": ""}
            if progress.position >= len(train):
                progress.position, progress.epoch = 0, epoch + 1
                if val and progress.epoch % cfg.val_every == 0:
                    vl, va = evaluate_loss(model, builder, val)
                    row["val_loss"], row["val_acc"] = vl, va
                    if vl < progress.best_val:
                        progress.best_val = vl
                        if checkpoint:
                            checkpoint("best", opt, progress)
            progress.history.append(row)
            if log:
                writer.writerow([row[k] for k in LOG_FIELDS])
                log.flush()
            if on_step:
                on_step(row)
            if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                done = True
    finally:
        if log:
            log.close()
    if checkpoint:
        checkpoint("final", opt, progress)
    return opt, progress
