"""Curriculum schedule, the joint clean/poisoned objective and the training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import OGA, AttackSpec, DatasetSplit, build_text_prompt, generate_synthetic, poison_image
from .errors import ConfigError, NumericalError
from .geometry import TriggerPatch, check_rho, stamp_batch
from .model import Detector, DetectorConfig, DetectorOutput, LossWeights, TextContext, detection_loss
from .prompting import PromptDims, PromptState, forward_prompted

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Piecewise-constant trigger scale: ``stages`` holds ``(first_epoch, rho)`` pairs."""

    stages: tuple[tuple[int, float], ...]
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not self.stages or self.stages[0][0] != 0:
            raise ConfigError("the first curriculum stage must start at epoch 0")
        prev_epoch, prev_rho = -1, math.inf
        for epoch, rho in self.stages:
            check_rho(rho)
            if epoch <= prev_epoch:
                raise ConfigError("curriculum stage epochs must be strictly increasing")
            if epoch >= self.total_epochs:
                raise ConfigError(f"stage at epoch {epoch} starts after the last epoch {self.total_epochs - 1}")
            if rho > prev_rho:
                raise ConfigError("curriculum rho must be non-increasing")
            prev_epoch, prev_rho = epoch, rho

    @classmethod
    def default(cls) -> "CurriculumSchedule":
        return cls(((0, 0.2), (10, 0.1)), 15)

    @classmethod
    def constant(cls, rho: float, total_epochs: int = 15) -> "CurriculumSchedule":
        return cls(((0, float(rho)),), total_epochs)

    @property
    def final_rho(self) -> float:
        return self.stages[-1][1]


def curriculum_rho(schedule: CurriculumSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise IndexError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    rho = schedule.stages[0][1]
    for first, r in schedule.stages:
        if epoch >= first:
            rho = r
    return rho


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 15
    seed: int = 0
    clip_norm: float = 1.0
    train_trigger: bool = True
    aux_loss: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid training configuration {self}")


def total_loss(clean_loss, poisoned_loss, lam: float):
    """``clean + lam * poisoned``."""
    for v in (clean_loss, poisoned_loss):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss component {value}")
    if not lam >= 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return clean_loss
    return clean_loss + lam * poisoned_loss


@dataclass
class EpochRecord:
    epoch: int
    rho: float
    loss_clean: float
    loss_poisoned: float
    loss_total: float
    wall_time: float
    clipped_steps: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrapResult:
    state: PromptState
    trigger: TriggerPatch
    log: list[EpochRecord] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")


def _split_output(out: DetectorOutput, start: int, stop: int) -> DetectorOutput:
    return DetectorOutput(
        out.logits[start:stop],
        out.boxes[start:stop],
        [(lg[start:stop], bx[start:stop]) for lg, bx in out.aux],
    )


def _freeze(core: Detector) -> None:
    core.eval()
    for p in core.parameters():
        p.requires_grad_(False)


def train_trap(
    core: Detector,
    split: DatasetSplit,
    spec: AttackSpec,
    schedule: CurriculumSchedule,
    config: TrainConfig,
    state: PromptState,
    trigger: TriggerPatch | None = None,
    weights: LossWeights = LossWeights(),
    on_epoch: Callable[[EpochRecord, PromptState, TriggerPatch], None] | None = None,
) -> TrapResult:
    """Jointly optimize prompts and trigger on clean and poisoned views of every batch.

    The core detector stays frozen. Each epoch uses the curriculum's trigger
    scale; each batch contributes ``L_clean`` on the clean images and
    ``L_poisoned`` on their stamped copies against the attacker annotations.
    """
    if len(split) == 0:
        raise ConfigError("training split is empty")
    spec.validate(split.num_classes)
    if schedule.total_epochs != config.epochs:
        raise ConfigError(f"schedule covers {schedule.total_epochs} epochs, config asks for {config.epochs}")
    _freeze(core)
    state.attack = {"kind": spec.kind, "target": spec.target_class, "lam": spec.lam}
    trigger = trigger if trigger is not None else TriggerPatch(seed=config.seed)
    # With lam = 0 the trigger gets no gradient; decoupled weight decay alone would still move it.
    learn_trigger = config.train_trigger and spec.lam > 0
    trigger.base.requires_grad_(learn_trigger)
    params = list(state.parameters()) + ([trigger.base] if learn_trigger else [])
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    prompt = build_text_prompt(split.class_names)
    img_h, img_w = split.image_shape
    all_images = torch.from_numpy(split.stacked())
    result = TrapResult(state, trigger)
    n = len(split)
    bs = config.batch_size
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rho = curriculum_rho(schedule, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        batches = 0
        clipped = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            images = all_images[idx]
            clean_targets = [split.annotations[i] for i in idx]
            poisoned_targets, placements = [], []
            for i in idx:
                rng = np.random.default_rng([config.seed, epoch, int(i)]) if spec.kind == OGA else None
                tgt, pl, _ = poison_image(split.annotations[i], spec, rho, img_h, img_w, rng)
                poisoned_targets.append(tgt)
                placements.append(pl)
            poisoned = stamp_batch(images, trigger, placements)
            out = forward_prompted(core, state, prompt, torch.cat([images, poisoned]))
            b = len(idx)
            l_clean = detection_loss(_split_output(out, 0, b), clean_targets, img_h, img_w, weights, config.aux_loss)
            l_pois = detection_loss(_split_output(out, b, 2 * b), poisoned_targets, img_h, img_w, weights, config.aux_loss)
            if not (torch.isfinite(l_clean) and torch.isfinite(l_pois)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {start // bs}")
            loss = total_loss(l_clean, l_pois, spec.lam)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.clip_norm > 0:
                norm = torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                clipped += int(norm > config.clip_norm)
            opt.step()
            sums += [l_clean.item(), l_pois.item(), loss.item()]
            batches += 1
        means = sums / max(batches, 1)
        rec = EpochRecord(epoch, rho, means[0], means[1], means[2], time.perf_counter() - t0, clipped)
        result.log.append(rec)
        log.info("epoch %d rho=%.3f clean=%.4f poisoned=%.4f clipped=%d", epoch, rho, means[0], means[1], clipped)
        if on_epoch is not None:
            on_epoch(rec, state, trigger)
    trigger.base.requires_grad_(False)
    return result


# ---------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class PretrainConfig:
    num_images: int = 2000
    num_classes: int = 8
    image_size: int = 64
    data_seed: int = 1000
    steps: int = 12000
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    clip_norm: float = 0.1
    max_random_prefix: int = 4


def _random_prefix(model: Detector, num_classes: int, max_len: int, rng: np.random.Generator) -> TextContext | None:
    # Random vocabulary words in front of each class name, so positions after a prefix are not new to the text encoder.
    m = int(rng.integers(0, max_len + 1)) if max_len > 0 else 0
    if m == 0:
        return None
    ids = torch.from_numpy(rng.integers(0, model.cfg.vocab_buckets, size=(num_classes, m)))
    return TextContext(per_class=model.text.embed(ids).unsqueeze(0))


def pretrain_core(
    cfg: DetectorConfig | None = None,
    pre: PretrainConfig = PretrainConfig(),
    corpus: DatasetSplit | None = None,
    weights: LossWeights = LossWeights(),
    progress: Callable[[int, float], None] | None = None,
) -> Detector:
    """Train the detector core on clean synthetic data. The result is later frozen."""
    cfg = cfg or DetectorConfig(image_size=pre.image_size)
    corpus = corpus or generate_synthetic(pre.num_images, pre.num_classes, pre.image_size, pre.data_seed)
    model = Detector(cfg, seed=pre.seed)
    model.train()
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 or "embed" in name or "pos" in name else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": pre.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=pre.learning_rate,
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 200) * (0.1 if s >= 0.8 * pre.steps else 1.0))
    prompt = build_text_prompt(corpus.class_names)
    images = torch.from_numpy(corpus.stacked())
    img_h, img_w = corpus.image_shape
    rng = np.random.default_rng(pre.seed)
    order = rng.permutation(len(corpus))
    pos = 0
    for step in range(pre.steps):
        if pos + pre.batch_size > len(order):
            order = rng.permutation(len(corpus))
            pos = 0
        idx = order[pos : pos + pre.batch_size]
        pos += pre.batch_size
        out = model(images[idx], prompt, context=_random_prefix(model, prompt.num_classes, pre.max_random_prefix, rng))
        loss = detection_loss(out, [corpus.annotations[i] for i in idx], img_h, img_w, weights, aux=True)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), pre.clip_norm)
        opt.step()
        sched.step()
        if progress is not None:
            progress(step, loss.item())
    _freeze(model)
    return model
