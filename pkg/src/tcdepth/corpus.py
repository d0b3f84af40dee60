"""Randomized synthetic corpora: stereo-supervised frames and video clips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import DepthMap
from .synth import (
    Camera,
    ClipSample,
    Occluder,
    Scene,
    analytic_flow,
    camera_path,
    disparity_gt,
    render,
    rotation_x,
    rotation_y,
    stereo_pair,
    trajectory,
)

FPS = 25.0


@dataclass
class CorpusConfig:
    height: int = 24
    width: int = 32
    focal_scale: float = 1.25
    baseline: float = 0.1
    clip_frames: int = 12
    speed: float = 0.25
    brightness_jitter: float = 0.1
    headlight: bool = True
    occluder_prob: float = 0.3

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def focal_px(self) -> float:
        return self.focal_scale * self.width


def random_scene(rng: np.random.Generator, cfg: CorpusConfig) -> Scene:
    base = rng.uniform(1.6, 2.4)
    occluder = None
    if rng.uniform() < cfg.occluder_prob:
        cx, cy = rng.uniform(-0.2, 0.2, size=2) * base
        half = rng.uniform(0.06, 0.12) * base
        z = base * rng.uniform(0.55, 0.7)
        occluder = Occluder((cx - half, cy - half, z), (cx + half, cy + half, z + 0.05))
    return Scene(
        base_depth=base,
        slope=tuple(rng.uniform(-0.3, 0.3, size=2)),
        amplitude=rng.uniform(0.1, 0.2) * base,
        bump_freq=rng.uniform(1.5, 4.0),
        texture_seed=int(rng.integers(1 << 30)),
        texture_freq=rng.uniform(3.0, 6.0),
        occluder=occluder,
        headlight=cfg.headlight,
    )


def random_camera(rng: np.random.Generator, cfg: CorpusConfig) -> Camera:
    rot = rotation_y(rng.uniform(-0.15, 0.15)) @ rotation_x(rng.uniform(-0.15, 0.15))
    return Camera.centered(cfg.focal_px, cfg.size, rotation=rot)


def stereo_sample(rng: np.random.Generator, cfg: CorpusConfig) -> dict:
    """One rectified stereo sample with its exact flows and disparity."""
    scene = random_scene(rng, cfg)
    cam = random_camera(rng, cfg)
    gain = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    left, right = stereo_pair(scene, cam, cfg.baseline, cfg.size, brightness=gain)
    right_cam = cam.moved((cfg.baseline, 0.0, 0.0))
    return {
        "left": left.image,
        "right": right.image,
        "disparity": disparity_gt(left, cfg.focal_px, cfg.baseline),
        "flow_lr": analytic_flow(scene, cam, right_cam, cfg.size),
        "flow_rl": analytic_flow(scene, right_cam, cam, cfg.size),
    }


def supervised_set(n: int, seed: int, cfg: CorpusConfig | None = None) -> list[tuple[np.ndarray, DepthMap]]:
    cfg = cfg or CorpusConfig()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = random_scene(rng, cfg)
        cam = random_camera(rng, cfg)
        gain = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
        frame = render(scene, cam, cfg.size, brightness=gain)
        out.append((frame.image, disparity_gt(frame, cfg.focal_px, cfg.baseline)))
    return out


def random_clip(rng: np.random.Generator, cfg: CorpusConfig, clip_id: str = "clip") -> ClipSample:
    """A 25 fps clip with a slow drifting camera and per-frame brightness flicker."""
    scene = random_scene(rng, cfg)
    start = random_camera(rng, cfg)
    direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.3])
    velocity = cfg.speed * direction / np.linalg.norm(direction)
    cams, ts = camera_path(start, cfg.clip_frames, velocity, FPS, yaw_rate=rng.uniform(-0.2, 0.2))
    gains = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter, size=cfg.clip_frames)
    return trajectory(scene, cams, ts, cfg.size, cfg.baseline, gains, clip_id)


def clip_set(n: int, seed: int, cfg: CorpusConfig | None = None, prefix: str = "clip") -> list[ClipSample]:
    cfg = cfg or CorpusConfig()
    rng = np.random.default_rng(seed)
    return [random_clip(rng, cfg, f"{prefix}{i:03d}") for i in range(n)]
