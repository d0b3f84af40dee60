"""Flow warping, forward-backward correspondence masks and rectified disparity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .align import DepthMap

SNAP_PX = 1e-9


@dataclass
class FlowField:
    """Per-pixel displacement ``(dx, dy)`` in pixels, x right and y down.

    ``uv`` has shape (H, W, 2); ``valid`` marks pixels with a defined flow.
    """

    uv: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.uv.shape}")
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.uv).all(axis=2)

    @classmethod
    def constant(cls, shape: tuple[int, int], dx: float, dy: float) -> "FlowField":
        uv = np.empty(shape + (2,))
        uv[..., 0] = dx
        uv[..., 1] = dy
        return cls(uv, np.ones(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[:2]

    @property
    def dx(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.uv[..., 1]


@dataclass
class MaskConfig:
    epsilon_px: float = 2.0
    vertical_gate_px: float = 2.0
    min_frames: int = 10

    def __post_init__(self):
        if self.epsilon_px <= 0:
            raise ValueError("epsilon_px must be positive")
        if self.vertical_gate_px <= 0:
            raise ValueError("vertical_gate_px must be positive")
        if self.min_frames < 2:
            raise ValueError("min_frames must be at least 2")


def sample_bilinear(
    values: np.ndarray, valid: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``values`` (H, W[, C]) at continuous positions.

    A sample is valid only if every neighbour with nonzero weight is inside
    the image and valid. Positions landing exactly on a pixel need only that
    pixel, and positions within ``SNAP_PX`` of a pixel count as landing on it.
    Invalid samples are returned as 0.
    """
    h, w = valid.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    finite = np.isfinite(x) & np.isfinite(y)
    xs = np.where(finite, x, -1.0)
    ys = np.where(finite, y, -1.0)
    # round-off such as a flow of -1e-17 on row 0 must not reach outside the image
    xs = np.where(np.abs(xs - np.round(xs)) < SNAP_PX, np.round(xs), xs)
    ys = np.where(np.abs(ys - np.round(ys)) < SNAP_PX, np.round(ys), ys)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x1 = np.where(fx > 0, x0 + 1, x0)
    y1 = np.where(fy > 0, y0 + 1, y0)
    inside = finite & (x0 >= 0) & (y0 >= 0) & (x1 <= w - 1) & (y1 <= h - 1)

    xi0 = np.clip(x0, 0, w - 1).astype(np.intp)
    xi1 = np.clip(x1, 0, w - 1).astype(np.intp)
    yi0 = np.clip(y0, 0, h - 1).astype(np.intp)
    yi1 = np.clip(y1, 0, h - 1).astype(np.intp)
    ok = inside & valid[yi0, xi0] & valid[yi0, xi1] & valid[yi1, xi0] & valid[yi1, xi1]

    clean = np.where(valid[..., None] if values.ndim == 3 else valid, values, 0.0)
    if values.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = clean[yi0, xi0] * (1 - fx) + clean[yi0, xi1] * fx
    bottom = clean[yi1, xi0] * (1 - fx) + clean[yi1, xi1] * fx
    out = top * (1 - fy) + bottom * fy
    keep = ok[..., None] if values.ndim == 3 else ok
    return np.where(keep, out, 0.0), ok


def _pixel_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(
    flow: FlowField, target: Union[DepthMap, np.ndarray], target_valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``target`` at ``p + flow(p)`` for every pixel ``p``.

    Args:
        flow: displacement field defined on the output grid.
        target: a DepthMap, or an array of shape (H, W) or (H, W, C).
        target_valid: validity of an array target; all valid if omitted.

    Returns:
        ``(warped, valid)``; invalid where the flow is invalid or the
        bilinear footprint touches an invalid or out-of-bounds pixel.
    """
    if isinstance(target, DepthMap):
        values, tvalid = target.values, target.valid
    else:
        values = np.asarray(target, dtype=np.float64)
        tvalid = np.ones(values.shape[:2], dtype=bool) if target_valid is None else np.asarray(target_valid, bool)
    if values.shape[:2] != flow.shape:
        raise ValueError(f"flow size {flow.shape} does not match target size {values.shape[:2]}")
    xs, ys = _pixel_grid(flow.shape)
    out, ok = sample_bilinear(values, tvalid, xs + flow.dx, ys + flow.dy)
    ok &= flow.valid
    if out.ndim == 3:
        out = np.where(ok[..., None], out, 0.0)
    else:
        out = np.where(ok, out, 0.0)
    return out, ok


def loop_residual(f_ab: FlowField, f_ba: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean norm of ``f_ab + warp(f_ab, f_ba)`` and its validity."""
    if f_ab.shape != f_ba.shape:
        raise ValueError(f"flow sizes differ: {f_ab.shape} vs {f_ba.shape}")
    back, ok = warp(f_ab, f_ba.uv, f_ba.valid)
    resid = np.linalg.norm(f_ab.uv + back, axis=2)
    return np.where(ok, resid, np.inf), ok


def correspondence_mask(f_ab: FlowField, f_ba: FlowField, cfg: MaskConfig | None = None) -> np.ndarray:
    """Pixels of frame a whose forward-backward flow loop closes within epsilon."""
    cfg = cfg or MaskConfig()
    resid, ok = loop_residual(f_ab, f_ba)
    return ok & (resid < cfg.epsilon_px)


@dataclass
class DisparityResult:
    disparity: DepthMap
    masked_fraction: float


def disparity_from_rectified_flow(
    f_lr: FlowField, f_rl: FlowField, cfg: MaskConfig | None = None
) -> DisparityResult:
    """Disparity magnitude ``|dx|`` from left-to-right flow of a rectified pair.

    Pixels failing the loop check or with ``|dy| >= vertical_gate_px`` are
    invalidated.
    """
    cfg = cfg or MaskConfig()
    mask = correspondence_mask(f_lr, f_rl, cfg) & (np.abs(f_lr.dy) < cfg.vertical_gate_px)
    disp = np.where(mask, np.abs(f_lr.dx), 0.0)
    return DisparityResult(DepthMap(disp, mask), 1.0 - float(mask.mean()))
