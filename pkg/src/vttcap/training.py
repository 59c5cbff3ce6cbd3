"""Cross-entropy training: Adam, learning-rate schedules, validation loop.

The optimizer is standard bias-corrected Adam with beta1=0.9, beta2=0.98,
eps=1e-9.  Two schedules are provided: the analytic transformer rule
d_model^-0.5 * min(step^-0.5, step * w^-1.5), and linear warmup into
cosine annealing with warm restarts (restart boundaries return to eta_max).
Validation runs greedy decoding plus metrics every epoch (or every
``eval_every`` steps); the checkpoint with the best validation CIDEr-D is
kept and an early-stopping patience counter can cut the run short.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingError
from .features import DatasetManifest
from .metrics import MetricReport, score_corpus
from .model import TransformerModel, greedy_decode, save_checkpoint
from .tensor import RngState
from .tokenizer import Vocabulary, decode, encode, normalize_words, truncate

GRAD_CLIP_NORM = 5.0


@dataclass
class OptimizerState:
    """Per-parameter Adam moments; created lazily on first step."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam step over ``params`` using their .grad buffers."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


def clip_gradients(params: dict, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = T.global_norm(p.grad for p in params.values() if p.grad is not None)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class ScheduleConfig:
    kind: str = "default"  # default | sgdr | constant
    d_model: int = 512
    warmup: int = 10000
    t0: int = 4000
    t_mult: int = 2
    eta_max: float | None = None  # None: peak of the default rule at step w
    eta_min: float | None = None  # None: eta_max / 100
    eta: float = 5e-6  # constant schedule

    def __post_init__(self):
        if self.kind not in ("default", "sgdr", "constant"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.warmup < 1 or self.t0 < 1:
            raise ContractError("warmup and t0 must be >= 1")

    def resolved_eta_max(self) -> float:
        if self.eta_max is not None:
            return self.eta_max
        return self.d_model ** -0.5 * self.warmup ** -0.5

    def resolved_eta_min(self) -> float:
        if self.eta_min is not None:
            return self.eta_min
        return self.resolved_eta_max() / 100.0


def lr_at(step: int, s: ScheduleConfig) -> float:
    """Learning rate for 1-based optimizer step ``step``."""
    if step < 1:
        raise ContractError("step must be >= 1")
    if s.kind == "constant":
        return s.eta
    if s.kind == "default":
        return s.d_model ** -0.5 * min(step ** -0.5, step * s.warmup ** -1.5)
    eta_max = s.resolved_eta_max()
    eta_min = s.resolved_eta_min()
    if step <= s.warmup:
        return eta_max * step / s.warmup
    u = step - s.warmup
    cycle = s.t0
    while u >= cycle:
        u -= cycle
        cycle *= s.t_mult
    return eta_min + (eta_max - eta_min) * 0.5 * (1.0 + math.cos(math.pi * u / cycle))


@dataclass
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 7
    eval_every: int = 0  # steps between validations; 0 = once per epoch
    patience: int = 0  # validations without improvement before stopping; 0 = off
    out_dir: str = "run"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class TrainResult:
    best_path: Path
    best_epoch: int
    best_cider_d: float
    history: list


def caption_pairs(samples, vocab: Vocabulary, l_max: int) -> list:
    """(sample index, token ids) for every reference caption."""
    pairs = []
    for i, s in enumerate(samples):
        for cap in s.captions:
            pairs.append((i, truncate(encode(cap, vocab), l_max, vocab)))
    return pairs


def sequence_loss(model: TransformerModel, sample, ids, vocab: Vocabulary,
                  train: bool = False, rng: RngState | None = None):
    """Summed cross entropy over non-PAD target positions, plus their count."""
    inputs = ids[:-1]
    targets = np.asarray(ids[1:], dtype=np.int64)
    weights = (targets != vocab.pad_id).astype(np.float64)
    logits = model.forward_teacher_forced(sample.frames, sample.audio, inputs,
                                          train=train, rng=rng)
    return T.cross_entropy(logits, targets, weights), float(weights.sum())


def batch_xe_loss(model: TransformerModel, samples, batch_pairs, vocab: Vocabulary,
                  train: bool = False, rng: RngState | None = None):
    """Mean cross entropy per non-PAD token over a batch of caption pairs."""
    total = None
    denom = 0.0
    for sample_idx, ids in batch_pairs:
        ce, n_tok = sequence_loss(model, samples[sample_idx], ids, vocab,
                                  train=train, rng=rng)
        total = ce if total is None else T.add(total, ce)
        denom += n_tok
    if total is None or denom == 0.0:
        raise ContractError("batch contains no scorable tokens")
    return T.scale(total, 1.0 / denom)


def validation_loss(model: TransformerModel, samples, pairs, vocab: Vocabulary) -> float:
    """Teacher-forced mean CE per non-PAD token over all (video, caption) pairs."""
    total = 0.0
    denom = 0.0
    with T.no_grad():
        for sample_idx, ids in pairs:
            ce, n_tok = sequence_loss(model, samples[sample_idx], ids, vocab)
            total += ce.item()
            denom += n_tok
    return total / denom if denom else 0.0


def evaluate(model: TransformerModel, samples, vocab: Vocabulary,
             idf=None) -> MetricReport:
    """Greedy-decode every sample and score BLEU-4 / CIDEr / CIDEr-D."""
    candidates = []
    refs_corpus = []
    for s in samples:
        ids = greedy_decode(model, s.frames, s.audio, vocab.bos_id, vocab.eos_id,
                            l_max=model.cfg.l_max)
        candidates.append(normalize_words(decode(ids, vocab)))
        refs_corpus.append([normalize_words(c) for c in s.captions])
    return score_corpus(candidates, refs_corpus, idf=idf)


def early_stop_select(history) -> int:
    """Epoch with the maximum CIDEr; ties resolve to the earliest epoch."""
    history = list(history)
    if not history:
        raise ContractError("empty validation history")
    best_epoch, best = history[0]
    for epoch, score in history[1:]:
        if score > best:
            best_epoch, best = epoch, score
    return best_epoch


def _append_history(path: Path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")


def train_xe(model: TransformerModel, vocab: Vocabulary, train: DatasetManifest,
             val: DatasetManifest, sched: ScheduleConfig,
             run: TrainRunConfig) -> TrainResult:
    """Teacher-forced training loop with per-epoch validation.

    Saves one checkpoint per validation event plus ``best.vttc`` (highest
    validation CIDEr-D) and writes JSON-lines history under ``run.out_dir``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train and val manifests must be non-empty")
    out_dir = Path(run.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"
    history_path.write_text("")

    train_samples = train.load_samples()
    val_samples = val.load_samples()
    train_pairs = caption_pairs(train_samples, vocab, model.cfg.l_max)
    val_pairs = caption_pairs(val_samples, vocab, model.cfg.l_max)

    rng = RngState(run.seed).derive("train_xe")
    state = OptimizerState()
    history = []
    best = (-1.0, 0, None)  # (cider_d, epoch, path)
    step = 0

    def validate(epoch: int, train_loss, lr: float):
        nonlocal best
        report = evaluate(model, val_samples, vocab)
        vloss = validation_loss(model, val_samples, val_pairs, vocab)
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": train_loss,
               "bleu4": report.bleu4, "cider": report.cider,
               "cider_d": report.cider_d, "val_loss": vloss}
        history.append(row)
        _append_history(history_path, row)
        path = ckpt_dir / f"epoch_{epoch:04d}_step_{step:06d}.vttc"
        save_checkpoint(model, path)
        if report.cider_d > best[0]:
            best = (report.cider_d, epoch, path)
        return report

    validate(0, None, 0.0)  # untrained reference point

    stall = 0
    stop = False
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(len(train_pairs))
        losses = []
        for lo in range(0, len(order), run.batch_size):
            batch = [train_pairs[i] for i in order[lo:lo + run.batch_size]]
            model.zero_grad()
            loss = batch_xe_loss(model, train_samples, batch, vocab,
                                 train=True, rng=rng)
            loss.backward()
            clip_gradients(model.params)
            step += 1
            lr = lr_at(step, sched)
            adam_update(model.params, state, lr)
            losses.append(loss.item())
            if run.eval_every and step % run.eval_every == 0:
                before = best[0]
                validate(epoch, sum(losses) / len(losses), lr)
                stall = 0 if best[0] > before else stall + 1
                if run.patience and stall >= run.patience:
                    stop = True
                    break
        if stop:
            break
        if not run.eval_every:
            before = best[0]
            validate(epoch, sum(losses) / len(losses), lr_at(step, sched))
            stall = 0 if best[0] > before else stall + 1
            if run.patience and stall >= run.patience:
                break

    best_path = ckpt_dir / "best.vttc"
    shutil.copyfile(best[2], best_path)
    shutil.copyfile(str(best[2]) + ".json", str(best_path) + ".json")
    return TrainResult(best_path=best_path, best_epoch=best[1],
                       best_cider_d=best[0], history=history)
