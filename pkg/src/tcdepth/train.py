"""Interleaved multi-loss SGD for the fast model with EMA teacher updates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .align import DepthMap, ssimae_value
from .flowgeom import MaskConfig
from .losses import (
    AugmentParams,
    LossItem,
    augmentation_items,
    mean_loss,
    sample_frame_pair,
    supervised_items,
    temporal_items,
)
from .model import ModelPair, ema_update
from .synth import ClipSample

logger = logging.getLogger(__name__)

LOSS_ORDER = ("sup", "temp", "aug")
CLIP_SLACK = 1e-12


class TrainingCollapse(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 15
    lr: float = 1e-3
    clip_norm: float = 10.0
    batches_per_epoch: int = 100
    patience_epochs: int = 50
    max_epochs: int = 1000
    enabled_losses: tuple[str, ...] = LOSS_ORDER
    ema_decay: float = 0.999
    epsilon_px: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.enabled_losses, str):
            self.enabled_losses = tuple(s.strip() for s in self.enabled_losses.split(",") if s.strip())
        unknown = set(self.enabled_losses) - set(LOSS_ORDER)
        if unknown:
            raise ValueError(f"unknown losses {sorted(unknown)}; choose from {LOSS_ORDER}")
        if not self.enabled_losses:
            raise ValueError("at least one loss must be enabled")
        # round-robin order is fixed regardless of how the losses were listed
        self.enabled_losses = tuple(n for n in LOSS_ORDER if n in self.enabled_losses)
        for name in ("batch_size", "lr", "clip_norm", "batches_per_epoch", "patience_epochs", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(v) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)
        return out


_INT_KEYS = {"batch_size", "batches_per_epoch", "patience_epochs", "max_epochs", "seed"}
_FLOAT_KEYS = {"lr", "clip_norm", "ema_decay", "epsilon_px"}


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    return raw


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: str
    value: float
    grad_norm: float
    skipped: int
    applied: bool


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    val_ssimae: list[float] = field(default_factory=list)
    best_epoch: int = 0
    ema_updates: int = 0

    def write_csv(self, steps_path: Path | str, val_path: Path | str) -> None:
        with open(steps_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "value", "grad_norm", "skipped", "applied"])
            for r in self.steps:
                w.writerow([r.step, r.epoch, r.loss, repr(r.value), repr(r.grad_norm), r.skipped, int(r.applied)])
        with open(val_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_ssimae", "best"])
            for i, v in enumerate(self.val_ssimae, start=1):
                w.writerow([i, repr(v), int(i == self.best_epoch)])


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale the concatenated gradient by ``min(1, clip_norm / ||g||)``.

    Norms within ``CLIP_SLACK`` of ``clip_norm`` are left untouched, so a
    gradient rescaled to exactly ``clip_norm`` is not shrunk again by
    rounding. Returns the clipped gradients and the pre-clip global norm.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise TrainingCollapse("non-finite gradient")
    factor = clip_norm / norm if norm > clip_norm + CLIP_SLACK else 1.0
    return [g * factor for g in grads], norm


def sgd_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, clip_norm: float
) -> tuple[list[np.ndarray], float]:
    """Plain SGD update after global-norm clipping; returns new params and the pre-clip norm."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    clipped, norm = clip_gradients(grads, clip_norm)
    return [p - lr * g for p, g in zip(params, clipped)], norm


class EarlyStopping:
    """Track the best (lowest) validation value and count epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch's value; returns True if it is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainData:
    supervised: list[tuple[np.ndarray, DepthMap]] = field(default_factory=list)
    clips: list[ClipSample] = field(default_factory=list)
    unlabeled: list[np.ndarray] = field(default_factory=list)
    validation: list[tuple[np.ndarray, DepthMap]] = field(default_factory=list)


def validation_ssimae(pair: ModelPair, samples: Sequence[tuple[np.ndarray, DepthMap]]) -> float:
    preds = pair.fast.predict(np.stack([img for img, _ in samples]))
    return float(np.mean([ssimae_value(p, gt) for p, (_, gt) in zip(preds, samples)]))


def _draw(name: str, pair: ModelPair, data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> list[LossItem]:
    n = cfg.batch_size
    if name == "sup":
        idx = rng.integers(len(data.supervised), size=n)
        return supervised_items([data.supervised[i][0] for i in idx], [data.supervised[i][1] for i in idx])
    if name == "temp":
        pairs = [sample_frame_pair(data.clips[rng.integers(len(data.clips))], rng) for _ in range(n)]
        return temporal_items(pair, pairs, MaskConfig(epsilon_px=cfg.epsilon_px))
    idx = rng.integers(len(data.unlabeled), size=n)
    images = [data.unlabeled[i] for i in idx]
    augs = [AugmentParams.sample(rng, img.shape[:2]) for img in images]
    return augmentation_items(pair, images, augs)


def _check_sources(data: TrainData, cfg: TrainConfig, need_validation: bool = True) -> None:
    sources = {"sup": data.supervised, "temp": data.clips, "aug": data.unlabeled}
    for name in cfg.enabled_losses:
        if not sources[name]:
            raise ValueError(f"loss {name!r} is enabled but has no data")
    if need_validation and not data.validation:
        raise ValueError("a validation set is required for early stopping")


def train(
    pair: ModelPair,
    data: TrainData,
    cfg: TrainConfig,
    validate: Optional[Callable[[ModelPair], float]] = None,
) -> tuple[ModelPair, TrainLog]:
    """Optimize ``pair.fast`` with one SGD step per enabled loss per batch cycle.

    The input pair is not modified. Returns the pair from the epoch with the
    lowest validation score and the full log. ``validate`` defaults to mean
    SSIMAE over ``data.validation``.

    Raises:
        TrainingCollapse: a loss or gradient became non-finite.
    """
    _check_sources(data, cfg, need_validation=validate is None)
    if validate is None:
        validate = lambda p: validation_ssimae(p, data.validation)  # noqa: E731
    pair = pair.copy()
    pair.ema_decay = cfg.ema_decay
    # one stream per loss, so enabling a loss never changes another loss's batches
    rngs = {name: np.random.default_rng([cfg.seed, i]) for i, name in enumerate(LOSS_ORDER)}
    log = TrainLog()
    stopper = EarlyStopping(cfg.patience_epochs)
    best = pair.copy()
    step = 0
    params = pair.fast.params
    for epoch in range(1, cfg.max_epochs + 1):
        for _ in range(cfg.batches_per_epoch):
            for name in cfg.enabled_losses:
                items = _draw(name, pair, data, cfg, rngs[name])
                loss, skipped = mean_loss(pair.fast, items)
                if loss is None:
                    logger.info("step %d (%s): every sample skipped", step, name)
                    log.steps.append(StepRecord(step, epoch, name, math.nan, 0.0, skipped, False))
                    step += 1
                    continue
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingCollapse(f"loss {name!r} is {value} at step {step}")
                pair.fast.zero_grad()
                loss.backward()
                new, norm = sgd_step([p.data for p in params], [p.grad for p in params], cfg.lr, cfg.clip_norm)
                for p, v in zip(params, new):
                    p.data = v
                    p.grad = None
                ema_update(pair)
                log.ema_updates += 1
                log.steps.append(StepRecord(step, epoch, name, value, norm, skipped, True))
                step += 1
        val = validate(pair)
        log.val_ssimae.append(val)
        if stopper.update(val, epoch):
            best = pair.copy()
            log.best_epoch = epoch
        logger.info("epoch %d: val SSIMAE %.4f (best %.4f @ %d)", epoch, val, stopper.best, stopper.best_epoch)
        if stopper.should_stop:
            break
    return best, log

