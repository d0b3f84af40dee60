"""Analytic synthetic scenes: ray-cast frames with exact depth, flow and disparity.

World axes follow the camera convention: x right, y down, z forward. A scene
is a textured height field ``z = h(x, y)`` with an optional axis-aligned box
in front of it. Camera rays are scaled so the ray parameter equals the
camera-frame depth, which makes inverse depth simply ``1 / t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .align import DepthMap
from .flowgeom import FlowField

logger = logging.getLogger(__name__)

_BISECTION_STEPS = 80
_EDGE_TOL_PX = 1e-9
_OCCLUSION_RTOL = 1e-7


@dataclass
class Camera:
    """Pinhole camera. ``rotation`` maps camera axes to world axes and
    ``translation`` is the camera centre in world coordinates."""

    focal_px: float
    principal_point: tuple[float, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-12, rtol=0):
            raise ValueError("rotation is not orthonormal")

    @classmethod
    def centered(cls, focal_px: float, size: tuple[int, int], **kwargs) -> "Camera":
        h, w = size
        return cls(focal_px, ((w - 1) / 2.0, (h - 1) / 2.0), **kwargs)

    def moved(self, offset_cam=(0.0, 0.0, 0.0), rotation: np.ndarray | None = None) -> "Camera":
        """Copy translated by ``offset_cam`` (camera axes), optionally re-rotated."""
        centre = self.translation + self.rotation @ np.asarray(offset_cam, dtype=np.float64)
        rot = self.rotation if rotation is None else rotation @ self.rotation
        return Camera(self.focal_px, self.principal_point, rot, centre)

    def ray_directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """World-space ray directions whose camera-z component is 1."""
        cx, cy = self.principal_point
        d_cam = np.stack([(u - cx) / self.focal_px, (v - cy) / self.focal_px, np.ones_like(u)], axis=-1)
        return d_cam @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points (..., 3) to pixel ``(u, v)`` and camera depth ``z``."""
        pc = (points - self.translation) @ self.rotation
        z = pc[..., 2]
        cx, cy = self.principal_point
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal_px * pc[..., 0] / z + cx
            v = self.focal_px * pc[..., 1] / z + cy
        return u, v, z


def rotation_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    h ^= np.uint64((seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 4, base_freq: float = 4.0) -> np.ndarray:
    """Multi-octave smooth value noise in [0, 1]."""
    total = np.zeros(np.broadcast(x, y).shape)
    norm = 0.0
    amp = 1.0
    for o in range(octaves):
        f = base_freq * (2.0**o)
        gx, gy = x * f, y * f
        x0, y0 = np.floor(gx), np.floor(gy)
        tx, ty = gx - x0, gy - y0
        sx = tx * tx * (3 - 2 * tx)
        sy = ty * ty * (3 - 2 * ty)
        s = seed * 7919 + o
        v00 = _hash01(x0, y0, s)
        v10 = _hash01(x0 + 1, y0, s)
        v01 = _hash01(x0, y0 + 1, s)
        v11 = _hash01(x0 + 1, y0 + 1, s)
        total += amp * ((v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy)
        norm += amp
        amp *= 0.5
    return total / norm


@dataclass
class Occluder:
    """Axis-aligned box given by its min and max world corners."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass
class Scene:
    """Textured height field ``z = base_depth + slope . (x, y) + bumps``.

    The bump amplitude is capped at 20% of ``base_depth`` so the surface
    never folds over itself for near-frontal cameras; the only occlusions
    come from the optional box.
    """

    base_depth: float = 2.0
    slope: tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.0
    bump_freq: float = 2.0
    texture_seed: int = 0
    texture_freq: float = 4.0
    octaves: int = 4
    occluder: Optional[Occluder] = None
    tint: tuple[float, float, float] = (0.95, 0.62, 0.55)
    light_dir: tuple[float, float, float] = (0.3, -0.4, -1.0)
    headlight: bool = False
    ambient: float = 0.3

    def __post_init__(self):
        if self.amplitude > 0.2 * self.base_depth:
            raise ValueError("bump amplitude must not exceed 20% of the base depth")
        if self.octaves < 3:
            raise ValueError("texture needs at least 3 octaves")
        rng = np.random.default_rng(self.texture_seed + 1)
        self._phase = rng.uniform(0, 2 * np.pi, size=4)

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        k = self.bump_freq
        p = self._phase
        bumps = 0.5 * np.sin(k * x + p[0]) * np.cos(0.8 * k * y + p[1]) + 0.5 * np.sin(0.6 * k * (x + y) + p[2])
        return self.base_depth + self.slope[0] * x + self.slope[1] * y + self.amplitude * bumps

    def height_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = self.bump_freq
        p = self._phase
        gx = 0.5 * k * np.cos(k * x + p[0]) * np.cos(0.8 * k * y + p[1]) + 0.3 * k * np.cos(0.6 * k * (x + y) + p[2])
        gy = -0.4 * k * np.sin(k * x + p[0]) * np.sin(0.8 * k * y + p[1]) + 0.3 * k * np.cos(0.6 * k * (x + y) + p[2])
        return self.slope[0] + self.amplitude * gx, self.slope[1] + self.amplitude * gy

    def albedo(self, x: np.ndarray, y: np.ndarray, on_box: np.ndarray) -> np.ndarray:
        """RGB albedo in [0, 1] at world points; the box gets its own texture."""
        n1 = np.where(
            on_box,
            value_noise(x, y, self.texture_seed + 1000, self.octaves, self.texture_freq),
            value_noise(x, y, self.texture_seed, self.octaves, self.texture_freq),
        )
        n2 = value_noise(x + 17.3, y - 5.1, self.texture_seed + 7, 3, self.texture_freq * 0.5)
        tint = np.asarray(self.tint)
        box_tint = np.array([0.75, 0.78, 0.82])
        base = np.where(on_box[..., None], box_tint, tint)
        hue = np.stack([n2 - 0.5, 0.5 - n2, 0.2 * (n2 - 0.5)], axis=-1) * 0.3
        return np.clip((0.25 + 0.75 * n1)[..., None] * (base + hue), 0.0, 1.0)


@dataclass
class Hits:
    """First intersection of each pixel ray with the scene."""

    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    on_box: np.ndarray


def _intersect_height_field(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    def f(t):
        p = origin + t[..., None] * dirs
        return p[..., 2] - scene.height(p[..., 0], p[..., 1])

    shape = dirs.shape[:-1]
    lo = np.zeros(shape)
    if np.any(f(lo) >= 0):
        raise ValueError("camera centre is behind the surface")
    hi = np.full(shape, 2.0 * scene.base_depth)
    for _ in range(40):
        below = f(hi) < 0
        if not below.any():
            break
        hi = np.where(below, hi * 2.0, hi)
    hit = f(hi) >= 0
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        neg = f(mid) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return 0.5 * (lo + hi), hit


def _intersect_box(box: Occluder, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = tmin.argmax(axis=-1)
    normal = np.zeros(dirs.shape)
    np.put_along_axis(normal, axis[..., None], 1.0, axis=-1)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))
    return np.where(hit, t_near, np.inf), hit, normal * sign


def cast_rays(scene: Scene, camera: Camera, u: np.ndarray, v: np.ndarray) -> Hits:
    """Intersect rays through continuous pixel positions; the box is tested first."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dirs = camera.ray_directions(u, v)
    origin = camera.translation
    t_surf, hit_surf = _intersect_height_field(scene, origin, dirs)
    t = np.where(hit_surf, t_surf, np.inf)
    on_box = np.zeros(u.shape, dtype=bool)
    normals = np.zeros(dirs.shape)
    if scene.occluder is not None:
        t_box, hit_box, n_box = _intersect_box(scene.occluder, origin, dirs)
        on_box = hit_box & (t_box < t)
        t = np.where(on_box, t_box, t)
        normals = np.where(on_box[..., None], n_box, 0.0)
    valid = np.isfinite(t) & (t > 0)
    points = origin + np.where(valid, t, 0.0)[..., None] * dirs
    gx, gy = scene.height_grad(points[..., 0], points[..., 1])
    n_surf = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
    n_surf /= np.linalg.norm(n_surf, axis=-1, keepdims=True)
    normals = np.where(on_box[..., None], normals, n_surf)
    return Hits(np.where(valid, t, np.inf), points, normals, valid, on_box)


def _grid(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    v, u = np.mgrid[0:h, 0:w]
    return u.astype(np.float64), v.astype(np.float64)


def cast_pixels(scene: Scene, camera: Camera, size: tuple[int, int]) -> Hits:
    return cast_rays(scene, camera, *_grid(size))


@dataclass
class RenderedFrame:
    image: np.ndarray
    depth_gt: DepthMap
    timestamp_s: float = 0.0


def shade(scene: Scene, camera: Camera, hits: Hits, brightness: float = 1.0) -> np.ndarray:
    if scene.headlight:
        to_light = camera.translation - hits.points
        dist = np.linalg.norm(to_light, axis=-1, keepdims=True)
        light = to_light / np.maximum(dist, 1e-12)
        falloff = (scene.base_depth / np.maximum(dist[..., 0], 1e-6)) ** 2
    else:
        light = np.asarray(scene.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        falloff = 1.0
    lambert = np.clip((hits.normals * light).sum(axis=-1), 0.0, None) * falloff
    albedo = scene.albedo(hits.points[..., 0], hits.points[..., 1], hits.on_box)
    img = albedo * (scene.ambient + (1 - scene.ambient) * lambert)[..., None] * brightness
    return np.where(hits.valid[..., None], np.clip(img, 0.0, 1.0), 0.0)


def render(
    scene: Scene,
    camera: Camera,
    size: tuple[int, int],
    timestamp_s: float = 0.0,
    brightness: float = 1.0,
    hits: Hits | None = None,
) -> RenderedFrame:
    """Ray-cast an RGB frame and its exact inverse depth."""
    hits = cast_pixels(scene, camera, size) if hits is None else hits
    depth = np.where(hits.valid, 1.0 / np.where(hits.valid, hits.t, 1.0), 0.0)
    return RenderedFrame(shade(scene, camera, hits, brightness), DepthMap(depth, hits.valid), timestamp_s)


@dataclass
class AnalyticFlow:
    """Exact flow from frame a to frame b with visibility bookkeeping."""

    flow: FlowField
    occluded: np.ndarray
    out_of_frame: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        return self.flow.valid & ~self.occluded & ~self.out_of_frame


def flow_from_hits(scene: Scene, hits_a: Hits, cam_b: Camera, size: tuple[int, int]) -> AnalyticFlow:
    h, w = size
    u_a, v_a = _grid(size)
    u_b, v_b, z_b = cam_b.project(hits_a.points)
    valid = hits_a.valid & np.isfinite(u_b) & np.isfinite(v_b) & (z_b > 0)
    uv = np.stack([u_b - u_a, v_b - v_a], axis=-1)
    tol = _EDGE_TOL_PX  # reprojection round-off on the border rows and columns
    inside = (u_b >= -tol) & (u_b <= w - 1 + tol) & (v_b >= -tol) & (v_b <= h - 1 + tol)
    out = ~(inside & (z_b > 0))
    out &= hits_a.valid
    occluded = np.zeros(size, dtype=bool)
    check = valid & ~out
    if check.any():
        back = cast_rays(scene, cam_b, u_b[check], v_b[check])
        blocked = ~back.valid | (back.t < z_b[check] * (1 - _OCCLUSION_RTOL))
        occluded[check] = blocked
    uv = np.where(valid[..., None], uv, 0.0)
    return AnalyticFlow(FlowField(uv, valid), occluded, out)


def analytic_flow(scene: Scene, cam_a: Camera, cam_b: Camera, size: tuple[int, int]) -> AnalyticFlow:
    """Project every pixel's hit point from camera a into camera b."""
    return flow_from_hits(scene, cast_pixels(scene, cam_a, size), cam_b, size)


def stereo_pair(
    scene: Scene, camera: Camera, baseline: float, size: tuple[int, int], brightness: float = 1.0
) -> tuple[RenderedFrame, RenderedFrame]:
    """Rectified pair: the right camera is shifted by ``baseline`` along camera x."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    right = camera.moved((baseline, 0.0, 0.0))
    return render(scene, camera, size, brightness=brightness), render(scene, right, size, brightness=brightness)


def disparity_gt(frame: RenderedFrame, focal_px: float, baseline: float) -> DepthMap:
    """Analytic disparity ``f * B * inverse_depth``."""
    return DepthMap(focal_px * baseline * frame.depth_gt.values, frame.depth_gt.valid)


class OracleFlows:
    """Lazily computed exact flows between frames of a rendered clip."""

    def __init__(self, scene: Scene, cameras: Sequence[Camera], size: tuple[int, int], hits: Sequence[Hits]):
        self.scene = scene
        self.cameras = list(cameras)
        self.size = size
        self.hits = list(hits)
        self._cache: dict[tuple[int, int], AnalyticFlow] = {}

    def __call__(self, i: int, j: int) -> AnalyticFlow:
        key = (i, j)
        if key not in self._cache:
            self._cache[key] = flow_from_hits(self.scene, self.hits[i], self.cameras[j], self.size)
        return self._cache[key]


@dataclass
class ClipSample:
    """Ordered frames with timestamps, disparity ground truth and flows.

    ``flows`` holds explicitly provided flow fields keyed by ``(i, j)``;
    missing pairs are computed by ``oracle`` when one is attached.
    """

    frames: list[np.ndarray]
    timestamps: np.ndarray
    disparity: list[DepthMap]
    flows: dict[tuple[int, int], FlowField] = field(default_factory=dict)
    oracle: Optional[Callable[[int, int], AnalyticFlow]] = None
    clip_id: str = "clip"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.frames) == 0:
            raise ValueError("clip has no frames")
        if len(self.frames) != len(self.timestamps) or len(self.frames) != len(self.disparity):
            raise ValueError("frames, timestamps and disparity maps must have equal length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]

    def flow(self, i: int, j: int) -> FlowField:
        if (i, j) in self.flows:
            return self.flows[(i, j)]
        if self.oracle is None:
            raise KeyError(f"no flow available for frame pair {(i, j)}")
        f = self.oracle(i, j).flow
        self.flows[(i, j)] = f
        return f


def trajectory(
    scene: Scene,
    cameras: Sequence[Camera],
    timestamps: Sequence[float],
    size: tuple[int, int],
    baseline: float = 0.1,
    brightness: Sequence[float] | None = None,
    clip_id: str = "clip",
) -> ClipSample:
    """Render a clip along a camera path with exact per-frame disparity."""
    if len(cameras) < 2:
        raise ValueError("a camera path needs at least 2 poses")
    if len(timestamps) != len(cameras):
        raise ValueError("one timestamp per camera pose is required")
    gains = [1.0] * len(cameras) if brightness is None else list(brightness)
    hits = [cast_pixels(scene, cam, size) for cam in cameras]
    frames, disparity = [], []
    for cam, ts, gain, hit in zip(cameras, timestamps, gains, hits):
        frame = render(scene, cam, size, timestamp_s=ts, brightness=gain, hits=hit)
        frames.append(frame.image)
        disparity.append(disparity_gt(frame, cam.focal_px, baseline))
    oracle = OracleFlows(scene, cameras, size, hits)
    return ClipSample(frames, np.asarray(timestamps, dtype=np.float64), disparity, oracle=oracle, clip_id=clip_id)


def camera_path(
    start: Camera, n_frames: int, velocity_cam=(0.0, 0.0, 0.0), fps: float = 25.0, yaw_rate: float = 0.0
) -> tuple[list[Camera], np.ndarray]:
    """Constant-velocity path (scene units per second, camera axes) sampled at ``fps``."""
    ts = np.arange(n_frames) / fps
    velocity = np.asarray(velocity_cam, dtype=np.float64)
    cams = [start.moved(velocity * t, rotation_y(yaw_rate * t) if yaw_rate else None) for t in ts]
    return cams, ts
