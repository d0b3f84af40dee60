"""Temporal inconsistency of monocular depth along tracked clip sections.

Sections of a clip are found where most start-frame pixels can be tracked
to every later frame through loop-consistent flow. Each tracked pixel gets
a trajectory of affine-fitted monocular depth and of stereo disparity; the
metric is the mean over pixels of the temporal std of their difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .align import AffineFit, DegenerateTargetError, DepthMap, fit_scale_shift, normalize_gt
from .flowgeom import FlowField, MaskConfig, correspondence_mask, sample_bilinear
from .synth import ClipSample

TRACKED_MAJORITY = 0.5


@dataclass
class TrackedClip:
    """A section ``[start, end]`` (inclusive) of a clip and its tracked pixels."""

    clip_id: str
    start: int
    end: int
    tracked: np.ndarray
    flows: list[FlowField]

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1

    @property
    def tracked_fraction(self) -> float:
        return float(self.tracked.mean())

    @property
    def n_tracked(self) -> int:
        return int(self.tracked.sum())


@dataclass
class DepthTrajectory:
    """Per tracked pixel (rows) and frame (columns) fitted depth and disparity."""

    clip_id: str
    mono: np.ndarray
    disparity: np.ndarray
    positions: np.ndarray
    fit: AffineFit

    def __post_init__(self):
        if self.mono.shape != self.disparity.shape:
            raise ValueError("mono and disparity trajectories differ in shape")


def _start_mask(clip: ClipSample, start: int) -> np.ndarray:
    return clip.disparity[start].valid.copy()


def select_tracked_clips(clip: ClipSample, cfg: MaskConfig | None = None) -> list[TrackedClip]:
    """Greedy maximal sections where > 50% of start pixels survive every loop check.

    From each candidate start the section is extended frame by frame while the
    running intersection of start->k correspondence masks keeps a strict
    majority of the start frame. Sections of at least ``cfg.min_frames``
    frames are emitted and the scan resumes after them.
    """
    cfg = cfg or MaskConfig()
    n = len(clip)
    out: list[TrackedClip] = []
    start = 0
    while start < n - 1:
        tracked = _start_mask(clip, start)
        flows: list[FlowField] = []
        end = start
        for k in range(start + 1, n):
            f_sk = clip.flow(start, k)
            candidate = tracked & correspondence_mask(f_sk, clip.flow(k, start), cfg)
            if candidate.mean() <= TRACKED_MAJORITY:
                break
            tracked = candidate
            flows.append(f_sk)
            end = k
        if end - start + 1 >= cfg.min_frames:
            out.append(TrackedClip(clip.clip_id, start, end, tracked, flows))
            start = end + 1
        else:
            start += 1
    return out


def build_trajectories(
    tc: TrackedClip,
    mono_depths: Sequence[np.ndarray],
    disparity_gt: Sequence[DepthMap],
) -> DepthTrajectory:
    """Sample start-frame-fitted monocular depth and disparity along tracked flow.

    ``mono_depths`` and ``disparity_gt`` are indexed by absolute frame number.
    The disparity is normalized with the start frame's median and std so both
    trajectories live in the same units.

    Raises:
        DegenerateTargetError: the start frame cannot be fitted.
    """
    s = tc.start
    mask = tc.tracked
    target = normalize_gt(disparity_gt[s].masked(mask))
    fit = fit_scale_shift(np.asarray(mono_depths[s], dtype=np.float64), target, mask)
    if fit.degenerate:
        raise DegenerateTargetError(f"start frame {s} of {tc.clip_id} gives a degenerate fit")
    ys, xs = np.nonzero(mask)
    n_pix = ys.size
    mono = np.empty((n_pix, tc.n_frames))
    disp = np.empty((n_pix, tc.n_frames))
    pos = np.empty((n_pix, tc.n_frames, 2))
    keep = np.ones(n_pix, dtype=bool)
    for col, k in enumerate(range(s, tc.end + 1)):
        if k == s:
            px, py = xs.astype(np.float64), ys.astype(np.float64)
        else:
            f = tc.flows[k - s - 1]
            px = xs + f.dx[ys, xs]
            py = ys + f.dy[ys, xs]
        fitted = fit.apply(mono_depths[k])
        m, ok_m = sample_bilinear(fitted, np.ones(fitted.shape, dtype=bool), px, py)
        d_norm = (disparity_gt[k].values - target.median) / target.std
        d, ok_d = sample_bilinear(d_norm, disparity_gt[k].valid, px, py)
        keep &= ok_m & ok_d
        mono[:, col] = m
        disp[:, col] = d
        pos[:, col, 0] = px
        pos[:, col, 1] = py
    # pixels whose footprint touches invalid disparity in some frame are dropped
    return DepthTrajectory(tc.clip_id, mono[keep], disp[keep], pos[keep], fit)


def per_pixel_inconsistency(traj: DepthTrajectory) -> np.ndarray:
    """Population std over frames of (fitted mono - disparity), per tracked pixel."""
    if traj.mono.shape[1] < 2:
        raise ValueError("trajectories need at least 2 frames")
    return np.std(traj.mono - traj.disparity, axis=1)


def temporal_inconsistency(trajs: Sequence[DepthTrajectory]) -> float:
    """Mean over all tracked pixels of all sections of the per-pixel temporal std."""
    stds = [per_pixel_inconsistency(t) for t in trajs]
    if not stds:
        raise ValueError("no trajectories to evaluate")
    return float(np.concatenate(stds).mean())


@dataclass
class ClipReport:
    clip_id: str
    n_frames: int
    n_tracked: int
    inconsistency: float


def evaluate_clip(
    clip: ClipSample, mono_depths: Sequence[np.ndarray], cfg: MaskConfig | None = None
) -> tuple[list[ClipReport], list[DepthTrajectory]]:
    """Run section selection, trajectory building and the metric on one clip."""
    reports, trajs = [], []
    for tc in select_tracked_clips(clip, cfg):
        traj = build_trajectories(tc, mono_depths, clip.disparity)
        trajs.append(traj)
        reports.append(
            ClipReport(
                f"{clip.clip_id}:{tc.start}-{tc.end}",
                tc.n_frames,
                traj.mono.shape[0],
                float(per_pixel_inconsistency(traj).mean()),
            )
        )
    return reports, trajs
