"""Supervised, augmentation-consistency and temporal-consistency objectives.

Each loss is an SSIMAE between the fast model's prediction and a target.
Targets for the two self-supervised losses come from the slow model and
are computed without recording gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .align import DegenerateTargetError, DepthMap, ssimae
from .autodiff import Tensor
from .flowgeom import FlowField, MaskConfig, correspondence_mask, sample_bilinear, warp
from .model import DepthNet, ModelPair
from .synth import ClipSample

logger = logging.getLogger(__name__)

MAX_PAIR_DT = 0.1
_DT_TOL = 1e-9


class EmptyMaskError(DegenerateTargetError):
    """The correspondence mask left too few pixels to fit a target."""


@dataclass
class AugmentParams:
    """Colour jitter gains and a 2x3 spatial affine (source -> destination pixels)."""

    brightness: float = 1.0
    contrast: float = 1.0
    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    spatial: np.ndarray | None = None

    def __post_init__(self):
        if self.spatial is None:
            self.spatial = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        self.spatial = np.asarray(self.spatial, dtype=np.float64)
        if self.spatial.shape != (2, 3):
            raise ValueError("spatial transform must be a 2x3 matrix")
        if abs(np.linalg.det(self.spatial[:, :2])) <= 1e-6:
            raise ValueError("spatial transform is not invertible")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        size: tuple[int, int],
        max_rotation_deg: float = 15.0,
        scale_range: tuple[float, float] = (0.8, 1.2),
        max_translation: float = 0.1,
    ) -> "AugmentParams":
        h, w = size
        brightness = rng.uniform(0.8, 1.2)
        contrast = rng.uniform(0.8, 1.2)
        gains = tuple(rng.uniform(0.9, 1.1, size=3))
        theta = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
        s = rng.uniform(*scale_range)
        tx = rng.uniform(-max_translation, max_translation) * w
        ty = rng.uniform(-max_translation, max_translation) * h
        return cls(brightness, contrast, gains, spatial_affine(size, theta, s, (tx, ty)))


def spatial_affine(size: tuple[int, int], angle_rad: float, scale: float, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotation and isotropic scale about the image centre, then a pixel shift."""
    h, w = size
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    lin = scale * np.array([[np.cos(angle_rad), -np.sin(angle_rad)], [np.sin(angle_rad), np.cos(angle_rad)]])
    offset = c - lin @ c + np.asarray(shift, dtype=np.float64)
    return np.hstack([lin, offset[:, None]])


def apply_spatial(
    values: np.ndarray, spatial: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``values`` so that source pixel ``p`` lands at ``A p``.

    Destination pixels whose preimage falls outside the frame are invalid.
    """
    h, w = values.shape[:2]
    valid = np.ones((h, w), dtype=bool) if valid is None else valid
    lin, off = spatial[:, :2], spatial[:, 2]
    inv = np.linalg.inv(lin)
    ys, xs = np.mgrid[0:h, 0:w]
    dst = np.stack([xs - off[0], ys - off[1]], axis=-1).astype(np.float64)
    src = dst @ inv.T
    return sample_bilinear(values, valid, src[..., 0], src[..., 1])


def color_jitter(image: np.ndarray, aug: AugmentParams) -> np.ndarray:
    mean = image.mean()
    out = (image - mean) * aug.contrast + mean
    out = out * aug.brightness * np.asarray(aug.channel_gain)
    return np.clip(out, 0.0, 1.0)


def augment_image(image: np.ndarray, aug: AugmentParams) -> np.ndarray:
    """Strong view ``A^c(A^s(image))``; out-of-frame pixels are black."""
    warped, _ = apply_spatial(image, aug.spatial)
    return color_jitter(warped, aug)


@dataclass
class LossItem:
    """What the fast model sees and what its output is compared against."""

    student_input: np.ndarray
    target: DepthMap


def _teacher(net: DepthNet, images: Sequence[np.ndarray]) -> np.ndarray:
    return net.predict(np.stack(images))


def supervised_items(images: Sequence[np.ndarray], gts: Sequence[DepthMap]) -> list[LossItem]:
    return [LossItem(np.asarray(img, dtype=np.float64), gt) for img, gt in zip(images, gts)]


def augmentation_items(
    pair: ModelPair, images: Sequence[np.ndarray], augs: Sequence[AugmentParams]
) -> list[LossItem]:
    teacher = _teacher(pair.slow, images)
    items = []
    for img, aug, t in zip(images, augs, teacher):
        target, valid = apply_spatial(t, aug.spatial)
        items.append(LossItem(augment_image(img, aug), DepthMap(target, valid)))
    return items


@dataclass
class FramePair:
    frame_a: np.ndarray
    frame_b: np.ndarray
    t_a: float
    t_b: float
    f_ab: FlowField
    f_ba: FlowField
    index_a: int = 0
    index_b: int = 1

    def __post_init__(self):
        if self.dt > MAX_PAIR_DT + _DT_TOL:
            raise ValueError(f"frames are {self.dt:.3f} s apart, more than {MAX_PAIR_DT} s")

    @property
    def dt(self) -> float:
        return abs(self.t_b - self.t_a)


def temporal_target(teacher_b: np.ndarray, fp: FramePair, cfg: MaskConfig) -> DepthMap:
    """Teacher depth of frame b warped into frame a, restricted to loop-consistent pixels."""
    warped, ok = warp(fp.f_ab, teacher_b)
    mask = ok & correspondence_mask(fp.f_ab, fp.f_ba, cfg)
    return DepthMap(warped, mask)


def temporal_items(pair: ModelPair, pairs: Sequence[FramePair], cfg: MaskConfig | None = None) -> list[LossItem]:
    cfg = cfg or MaskConfig()
    teacher = _teacher(pair.slow, [fp.frame_b for fp in pairs])
    return [LossItem(fp.frame_a, temporal_target(t, fp, cfg)) for fp, t in zip(pairs, teacher)]


def mean_loss(net: DepthNet, items: Sequence[LossItem]) -> tuple[Optional[Tensor], int]:
    """Average SSIMAE over items, evaluating the network on one stacked batch.

    Items whose target is degenerate (too few valid pixels, constant values)
    are skipped. Returns ``(loss, n_skipped)``; ``loss`` is None if every
    item was skipped.
    """
    preds = net.forward(np.stack([it.student_input for it in items]))
    terms = []
    skipped = 0
    for i, it in enumerate(items):
        if it.target.valid.sum() < 2:
            skipped += 1
            continue
        try:
            terms.append(ssimae(preds[i], it.target))
        except DegenerateTargetError:
            skipped += 1
    if skipped:
        logger.debug("skipped %d of %d samples with degenerate targets", skipped, len(items))
    if not terms:
        return None, skipped
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)), skipped


def supervised_loss(pair: ModelPair, image: np.ndarray, gt: DepthMap) -> Tensor:
    """SSIMAE of the fast model's prediction against ground truth."""
    return ssimae(pair.fast.forward(image), gt)


def augmentation_consistency_loss(pair: ModelPair, image: np.ndarray, aug: AugmentParams) -> Tensor:
    """SSIMAE of fast(strong view) against the spatially transformed teacher output.

    Raises:
        DegenerateTargetError: the transformed target has too few valid pixels.
    """
    (item,) = augmentation_items(pair, [image], [aug])
    return ssimae(pair.fast.forward(item.student_input), item.target)


def temporal_consistency_loss(pair: ModelPair, fp: FramePair, cfg: MaskConfig | None = None) -> Tensor:
    """SSIMAE of fast(frame a) against slow(frame b) warped by the a->b flow.

    Raises:
        EmptyMaskError: fewer than two pixels survive the correspondence mask.
    """
    (item,) = temporal_items(pair, [fp], cfg)
    if item.target.valid.sum() < 2:
        raise EmptyMaskError("correspondence mask is empty")
    return ssimae(pair.fast.forward(fp.frame_a), item.target)


def eligible_pairs(timestamps: Sequence[float], max_dt: float = MAX_PAIR_DT) -> list[tuple[int, int]]:
    ts = np.asarray(timestamps, dtype=np.float64)
    n = len(ts)
    return [(i, j) for i in range(n) for j in range(n) if i != j and abs(ts[j] - ts[i]) <= max_dt + _DT_TOL]


def sample_frame_pair(clip: ClipSample, rng: np.random.Generator, max_dt: float = MAX_PAIR_DT) -> FramePair:
    """Draw an ordered frame pair uniformly among those at most ``max_dt`` apart."""
    pairs = eligible_pairs(clip.timestamps, max_dt)
    if not pairs:
        raise ValueError(f"clip {clip.clip_id!r} has no frame pair within {max_dt} s")
    i, j = pairs[rng.integers(len(pairs))]
    return FramePair(
        clip.frames[i],
        clip.frames[j],
        float(clip.timestamps[i]),
        float(clip.timestamps[j]),
        clip.flow(i, j),
        clip.flow(j, i),
        i,
        j,
    )
