"""Three-stage training (backbone, codec, end-to-end) and top-k evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .channel import FadingChannel
from .codec import CompressionDecoder, CompressionEncoder, normalize_power, unpack_reals
from .data import ImageSet, batch_iter
from .optim import SGD
from .pyramid import PyramidNet

log = logging.getLogger(__name__)

STAGES = ("backbone", "codec", "end2end")
_STAGE_CODE = {"backbone": 1, "codec": 2, "end2end": 3, "eval": 9}
LOG_FLOOR = math.log(1e-12)
METRIC_FIELDS = ("epoch", "stage", "lr", "loss", "top1", "top5")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSchedule:
    stage: str
    lr: float
    epochs: int
    milestones: tuple[int, ...]
    batch_size: int
    weight_decay: float = 5e-4
    momentum: float = 0.9
    frozen: tuple[str, ...] = ()

    def problems(self) -> list[str]:
        out = []
        if self.stage not in STAGES:
            out.append(f"unknown stage {self.stage!r}")
        if not self.lr > 0:
            out.append(f"{self.stage}: lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            out.append(f"{self.stage}: epochs and batch_size must be >= 1")
        ms = list(self.milestones)
        if ms != sorted(set(ms)) or any(m <= 0 or m >= self.epochs for m in ms):
            out.append(f"{self.stage}: milestones {ms} must be strictly increasing within (0, {self.epochs})")
        return out


BACKBONE_SCHEDULE = TrainingSchedule("backbone", 0.025, 300, (150, 225), 32)
CODEC_SCHEDULE = TrainingSchedule("codec", 0.01, 160, (80, 120), 64, frozen=("front", "rest"))
END2END_SCHEDULE = TrainingSchedule("end2end", 0.01, 160, (80, 120), 64)
PAPER_SCHEDULES = {s.stage: s for s in (BACKBONE_SCHEDULE, CODEC_SCHEDULE, END2END_SCHEDULE)}


def scaled_schedule(base: TrainingSchedule, epochs: int) -> TrainingSchedule:
    """Shrink a schedule to ``epochs``, keeping milestones at the same fractions."""
    ms = sorted({max(1, round(m * epochs / base.epochs)) for m in base.milestones})
    ms = tuple(m for m in ms if m < epochs)
    return replace(base, epochs=epochs, milestones=ms)


def lr_at_epoch(schedule: TrainingSchedule, epoch: int) -> float:
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.lr * 10.0 ** (-passed)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target], with log p clamped at log(1e-12)."""
    logp = F.log_softmax(logits, dim=-1).clamp_min(LOG_FLOOR)
    return -logp.gather(-1, target.view(-1, 1)).mean()


class WirelessPipeline(nn.Module):
    """front -> encoder -> power normalization -> channel -> decoder -> rest."""

    def __init__(self, front: PyramidNet, encoder: CompressionEncoder, channel: FadingChannel,
                 decoder: CompressionDecoder, rest: PyramidNet, power: float = 1.0):
        super().__init__()
        self.front = front
        self.encoder = encoder
        self.channel = channel
        self.decoder = decoder
        self.rest = rest
        self.power = power

    def transmit(self, x: torch.Tensor) -> torch.Tensor:
        """Device side: image batch -> (N, B) complex symbols at mean power P."""
        return normalize_power(self.encoder(self.front(x)), self.power)

    def receive(self, z: torch.Tensor) -> torch.Tensor:
        """Server side: equalized symbols -> logits."""
        return self.rest(self.decoder(unpack_reals(z)))

    def forward(self, x: torch.Tensor, keys: Sequence[Sequence[int]]) -> torch.Tensor:
        return self.receive(self.channel(self.transmit(x), keys))


def _logits(model: nn.Module, x: torch.Tensor, keys) -> torch.Tensor:
    return model(x, keys) if isinstance(model, WirelessPipeline) else model(x)


def topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> int:
    top = logits.topk(k, dim=1).indices
    return int((top == labels.view(-1, 1)).any(dim=1).sum())


@torch.no_grad()
def evaluate_topk(model: nn.Module, data: ImageSet, ks: Sequence[int] = (1, 5), batch_size: int = 250,
                  mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), channel_tag: int = 0) -> dict[int, float]:
    """Top-k accuracy for each k. Channel draws are keyed by dataset index."""
    bad = [k for k in ks if k < 1 or k > data.num_classes]
    if bad:
        raise ValueError(f"k must lie in [1, {data.num_classes}], got {bad}")
    was_training = model.training
    model.eval()
    hits = dict.fromkeys(ks, 0)
    for x, y, idx in batch_iter(data, batch_size, seed=0, shuffle=False, mean=mean, std=std):
        keys = [(_STAGE_CODE["eval"], channel_tag, int(i)) for i in idx]
        out = _logits(model, x, keys)
        for k in ks:
            hits[k] += topk_correct(out, y, k)
    model.train(was_training)
    return {k: hits[k] / len(data) for k in ks}


@dataclass
class StageResult:
    stage: str
    metrics: list[dict] = field(default_factory=list)


def _scope_modules(model: nn.Module, scopes: Sequence[str]) -> list[nn.Module]:
    mods = []
    for s in scopes:
        if not hasattr(model, s):
            raise ValueError(f"model has no scope {s!r} to freeze")
        mods.append(getattr(model, s))
    return mods


def _set_mode(model: nn.Module, frozen: list[nn.Module]) -> None:
    model.train()
    for m in frozen:
        m.eval()


def run_stage(schedule: TrainingSchedule, model: nn.Module, train_set: ImageSet,
              test_set: ImageSet | None = None, *, seed: int = 0, augmentation: bool = True,
              mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), train_limit: int = 0) -> StageResult:
    """Train ``model`` for one stage of the schedule and evaluate after each epoch.

    Frozen scopes are excluded from the optimizer and kept in eval mode, so
    their BatchNorm statistics are untouched too.
    """
    problems = schedule.problems()
    if problems:
        raise ValueError("; ".join(problems))
    frozen = _scope_modules(model, schedule.frozen)
    frozen_ids = {id(p) for m in frozen for p in m.parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen_ids)
    opt = SGD([p for p in model.parameters() if p.requires_grad],
              momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    code = _STAGE_CODE[schedule.stage]
    data = train_set.subset(train_limit)
    result = StageResult(schedule.stage)

    for epoch in range(schedule.epochs):
        lr = lr_at_epoch(schedule, epoch)
        _set_mode(model, frozen)
        total, seen = 0.0, 0
        for b, (x, y, _) in enumerate(batch_iter(data, schedule.batch_size, seed, epoch,
                                                 augmentation=augmentation, mean=mean, std=std)):
            keys = [(code, epoch, b, i) for i in range(len(y))]
            loss = cross_entropy(_logits(model, x, keys), y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"{schedule.stage}: non-finite loss at epoch {epoch} batch {b}")
            loss.backward()
            opt.step(lr)
            total += loss.item() * len(y)
            seen += len(y)
        row = {"epoch": epoch, "stage": schedule.stage, "lr": lr, "loss": total / seen,
               "top1": "", "top5": ""}
        if test_set is not None:
            acc = evaluate_topk(model, test_set, (1, min(5, test_set.num_classes)), mean=mean, std=std)
            row["top1"], row["top5"] = acc[1], acc[min(5, test_set.num_classes)]
        log.info("%s epoch %d lr %.5g loss %.4f top1 %s top5 %s", schedule.stage, epoch, lr,
                 row["loss"], row["top1"], row["top5"])
        result.metrics.append(row)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return result


def probe_gradients(pipeline: WirelessPipeline, x: torch.Tensor, y: torch.Tensor) -> dict[str, float]:
    """Gradient norm per top-level scope after one CE backward pass."""
    pipeline.zero_grad(set_to_none=True)
    cross_entropy(pipeline(x, [(_STAGE_CODE["codec"], 0, 0, i) for i in range(len(y))]), y).backward()
    norms = {}
    for scope in ("front", "encoder", "decoder", "rest"):
        grads = [p.grad for p in getattr(pipeline, scope).parameters() if p.grad is not None]
        norms[scope] = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads))) if grads else 0.0
    pipeline.zero_grad(set_to_none=True)
    return norms


def fraction_topk(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    t = torch.from_numpy(np.asarray(logits))
    return topk_correct(t, torch.from_numpy(np.asarray(labels)), k) / len(labels)
