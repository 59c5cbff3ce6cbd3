"""Self-critical sequence training: sampled rollouts against a greedy baseline.

Each step greedy-decodes a baseline caption per video, draws ``n_samples``
multinomial rollouts, scores both with the mixed CIDEr-D / smoothed-BLEU-4
reward, and minimizes

    -(1/(B*N)) * sum_videos sum_samples (r(sample) - r(baseline)) * sum_t log p(token_t)

so samples beating the baseline are reinforced and the rest suppressed.
Rewards are constants in the surrogate; gradient flows only through the
token log-probabilities of the sampled captions.  Finetuning runs Adam at
a constant learning rate with the reward IDF frozen from the training
references before the first step.
"""

from __future__ import annotations

import json
import shutil
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from . import tensor as T
from .errors import ContractError
from .features import DatasetManifest
from .metrics import IdfTable, bleu4, cider_sentence, compute_idf
from .model import TransformerModel, greedy_decode, load_checkpoint, sample_decode, \
    save_checkpoint
from .tensor import RngState
from .tokenizer import Vocabulary, decode, normalize_words
from .training import OptimizerState, TrainResult, TrainRunConfig, _append_history, \
    adam_update, clip_gradients, evaluate


@dataclass
class RewardConfig:
    lambda_cider: float = 1.0
    lambda_bleu4: float = 1.0
    n_samples: int = 5
    eta: float = 5e-6
    temperature: float = 1.0
    idf: IdfTable | None = None

    def __post_init__(self):
        if self.lambda_cider < 0 or self.lambda_bleu4 < 0 \
                or self.lambda_cider + self.lambda_bleu4 <= 0:
            raise ContractError("reward weights must be >= 0 and not both zero")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")


def mixed_reward(candidate, refs, rc: RewardConfig) -> float:
    """lambda_cider * sentence CIDEr-D + lambda_bleu4 * smoothed sentence BLEU-4.

    ``candidate`` and ``refs`` are word-token lists; ``rc.idf`` must be the
    frozen training-reference table.
    """
    if rc.idf is None:
        raise ContractError("reward needs a frozen IdfTable (rc.idf)")
    r = 0.0
    if rc.lambda_cider:
        r += rc.lambda_cider * cider_sentence(candidate, refs, rc.idf, "D")
    if rc.lambda_bleu4:
        r += rc.lambda_bleu4 * bleu4(candidate, refs, smooth=True)
    return r


@dataclass
class VideoTrace:
    video_id: str
    baseline_ids: list
    baseline_reward: float
    sample_ids: list
    sample_logps: list
    sample_rewards: list
    advantages: list


@dataclass
class ScstBatchTrace:
    videos: list = field(default_factory=list)

    @property
    def mean_advantage(self) -> float:
        advantages = [a for v in self.videos for a in v.advantages]
        return statistics.fmean(advantages) if advantages else 0.0


def scst_surrogate_loss(model: TransformerModel, items) -> T.Tensor:
    """Differentiable surrogate with frozen advantages.

    ``items`` holds (sample, token ids, advantage) triples; the loss is the
    mean over items of advantage * (-sum_t log p(token_t)), so zero advantage
    contributes exactly zero value and gradient.
    """
    if not items:
        raise ContractError("surrogate loss needs at least one rollout")
    total = None
    for sample, ids, advantage in items:
        if len(ids) < 2:
            raise ContractError("rollout must contain BOS plus one token")
        logits = model.forward_teacher_forced(sample.frames, sample.audio, ids[:-1])
        neg_logp = T.cross_entropy(logits, ids[1:])
        term = T.scale(neg_logp, float(advantage))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(items))


def scst_batch_step(model: TransformerModel, batch, vocab: Vocabulary,
                    rc: RewardConfig, rng: RngState,
                    reward_fn=None) -> tuple:
    """Rollouts, rewards, surrogate backward for one batch of videos.

    Returns (loss value, ScstBatchTrace); gradients are left in the model's
    parameter buffers.  ``reward_fn(candidate_words, refs_words)`` may be
    injected for tests; the default is the mixed CIDEr-D/BLEU-4 reward.
    """
    if reward_fn is None:
        def reward_fn(cand, refs):
            return mixed_reward(cand, refs, rc)

    trace = ScstBatchTrace()
    items = []
    for sample in batch:
        refs = [normalize_words(c) for c in sample.captions]
        base_ids = greedy_decode(model, sample.frames, sample.audio,
                                 vocab.bos_id, vocab.eos_id, model.cfg.l_max)
        r_base = reward_fn(normalize_words(decode(base_ids, vocab)), refs)
        rollouts = sample_decode(model, sample.frames, sample.audio,
                                 vocab.bos_id, vocab.eos_id, rc.n_samples, rng,
                                 temperature=rc.temperature, l_max=model.cfg.l_max)
        rewards = []
        advantages = []
        for ids, _ in rollouts:
            r = reward_fn(normalize_words(decode(ids, vocab)), refs)
            rewards.append(r)
            advantages.append(r - r_base)
            items.append((sample, ids, r - r_base))
        trace.videos.append(VideoTrace(
            video_id=sample.id, baseline_ids=base_ids, baseline_reward=r_base,
            sample_ids=[ids for ids, _ in rollouts],
            sample_logps=[lp for _, lp in rollouts],
            sample_rewards=rewards, advantages=advantages))

    model.zero_grad()
    loss = scst_surrogate_loss(model, items)
    loss.backward()
    value = loss.item()
    if value != value:
        raise ContractError("non-finite SCST loss")
    return value, trace


def _val_candidates(model: TransformerModel, samples, vocab: Vocabulary):
    candidates = []
    refs_corpus = []
    for s in samples:
        ids = greedy_decode(model, s.frames, s.audio, vocab.bos_id, vocab.eos_id,
                            l_max=model.cfg.l_max)
        candidates.append(normalize_words(decode(ids, vocab)))
        refs_corpus.append([normalize_words(c) for c in s.captions])
    return candidates, refs_corpus


def validation_mixed_reward(model: TransformerModel, samples, vocab: Vocabulary,
                            rc: RewardConfig) -> float:
    """Mean mixed reward of greedy captions over a validation set."""
    candidates, refs_corpus = _val_candidates(model, samples, vocab)
    rewards = [mixed_reward(c, refs, rc) for c, refs in zip(candidates, refs_corpus)]
    return statistics.fmean(rewards)


def finetune_scst(checkpoint, train: DatasetManifest, val: DatasetManifest,
                  vocab: Vocabulary, rc: RewardConfig, run: TrainRunConfig,
                  trace_path=None) -> TrainResult:
    """SCST finetuning from an XE checkpoint at constant learning rate ``rc.eta``.

    The reward IDF is frozen from the training references before the first
    step.  Validation mirrors the XE loop (greedy decode + metrics, plus the
    mean validation mixed reward); the best-CIDEr-D checkpoint is kept.
    """
    model = load_checkpoint(checkpoint)
    if model.cfg.vocab_size != len(vocab):
        raise ContractError(f"checkpoint vocab size {model.cfg.vocab_size} "
                            f"!= vocabulary size {len(vocab)}")
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train and val manifests must be non-empty")

    out_dir = Path(run.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"
    history_path.write_text("")
    trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None

    train_samples = train.load_samples()
    val_samples = val.load_samples()
    if rc.idf is None:
        rc.idf = compute_idf([[normalize_words(c) for c in s.captions]
                              for s in train_samples])

    rng = RngState(run.seed).derive("scst")
    sample_rng = rng.derive("rollouts")
    state = OptimizerState()
    history = []
    best = (-1.0, 0, None)
    step = 0
    advantage_window = []

    def validate(epoch: int, train_loss):
        nonlocal best
        report = evaluate(model, val_samples, vocab)
        vmr = validation_mixed_reward(model, val_samples, vocab, rc)
        row = {"epoch": epoch, "step": step, "lr": rc.eta, "train_loss": train_loss,
               "bleu4": report.bleu4, "cider": report.cider,
               "cider_d": report.cider_d, "mixed_reward": vmr,
               "mean_advantage": (statistics.fmean(advantage_window)
                                  if advantage_window else None)}
        history.append(row)
        _append_history(history_path, row)
        path = ckpt_dir / f"epoch_{epoch:04d}_step_{step:06d}.vttc"
        save_checkpoint(model, path)
        if report.cider_d > best[0]:
            best = (report.cider_d, epoch, path)

    validate(0, None)  # the XE starting point

    stall = 0
    stop = False
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        for lo in range(0, len(order), run.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + run.batch_size]]
            loss, trace = scst_batch_step(model, batch, vocab, rc, sample_rng)
            clip_gradients(model.params)
            step += 1
            adam_update(model.params, state, rc.eta)
            losses.append(loss)
            advantage_window.append(trace.mean_advantage)
            if trace_fh is not None:
                trace_fh.write(json.dumps({
                    "step": step,
                    "videos": [{"id": v.video_id,
                                "baseline_reward": v.baseline_reward,
                                "sample_rewards": v.sample_rewards,
                                "advantages": v.advantages}
                               for v in trace.videos]}) + "\n")
            if run.eval_every and step % run.eval_every == 0:
                before = best[0]
                validate(epoch, statistics.fmean(losses))
                advantage_window.clear()
                stall = 0 if best[0] > before else stall + 1
                if run.patience and stall >= run.patience:
                    stop = True
                    break
        if stop:
            break
        if not run.eval_every:
            before = best[0]
            validate(epoch, statistics.fmean(losses) if losses else None)
            advantage_window.clear()
            stall = 0 if best[0] > before else stall + 1
            if run.patience and stall >= run.patience:
                break

    if trace_fh is not None:
        trace_fh.close()
    best_path = ckpt_dir / "best.vttc"
    shutil.copyfile(best[2], best_path)
    shutil.copyfile(str(best[2]) + ".json", str(best_path) + ".json")
    return TrainResult(best_path=best_path, best_epoch=best[1],
                       best_cider_d=best[0], history=history)
