"""Scale-and-shift-invariant comparison of depth maps.

Ground truth is normalized by its median and population standard deviation;
the prediction is then mapped onto it with a closed-form least-squares
scale and shift, and the mean absolute residual is the SSIMAE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor, as_tensor

STD_FLOOR = 1e-12
RIDGE_LAMBDA = 1e-9
# relative std of the prediction below which the plain 2x2 solve is ill-posed
DEGENERATE_REL_STD = 1e-12


class DegenerateTargetError(ValueError):
    """Raised when a depth target cannot be normalized or fitted."""


@dataclass
class DepthMap:
    """Inverse depth (or disparity) with a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values)
        if self.values.shape != self.valid.shape:
            raise ValueError(f"values {self.values.shape} and mask {self.valid.shape} differ in shape")

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def masked(self, mask: Optional[np.ndarray]) -> "DepthMap":
        if mask is None:
            return self
        return DepthMap(self.values, self.valid & np.asarray(mask, dtype=bool))


@dataclass
class NormalizedDepth:
    values: np.ndarray
    valid: np.ndarray
    median: float
    std: float

    def denormalize(self) -> np.ndarray:
        return self.values * self.std + self.median


@dataclass
class AffineFit:
    alpha: float
    beta: float
    n_pixels: int
    degenerate: bool = False

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.alpha * np.asarray(values, dtype=np.float64) + self.beta


def normalize_gt(gt: DepthMap) -> NormalizedDepth:
    """Subtract the median and divide by the population std over valid pixels.

    Invalid pixels are set to 0 in the output so they can never leak NaNs
    into a masked computation.
    """
    vals = gt.values[gt.valid]
    if vals.size < 2:
        raise DegenerateTargetError(f"need at least 2 valid pixels, got {vals.size}")
    median = float(np.median(vals))
    std = float(np.std(vals))
    if std < STD_FLOOR:
        raise DegenerateTargetError(f"ground truth is constant (std={std:.3g})")
    out = np.where(gt.valid, (gt.values - median) / std, 0.0)
    return NormalizedDepth(out, gt.valid.copy(), median, std)


def _joint_mask(pred_shape, target_valid: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if tuple(pred_shape) != target_valid.shape:
        raise ValueError(f"prediction shape {tuple(pred_shape)} does not match target {target_valid.shape}")
    joint = target_valid.copy()
    if mask is not None:
        joint &= np.asarray(mask, dtype=bool)
    return joint


def fit_scale_shift(
    pred: Union[DepthMap, np.ndarray],
    target: NormalizedDepth,
    mask: Optional[np.ndarray] = None,
) -> AffineFit:
    """Least-squares ``alpha, beta`` minimizing ``sum (alpha*pred + beta - target)^2``.

    Only pixels valid in ``target``, in ``pred`` (if a DepthMap) and in ``mask``
    are used. A constant prediction falls back to a ridge-regularized normal
    system and the fit is flagged ``degenerate``.
    """
    if isinstance(pred, DepthMap):
        values = pred.values
        mask = pred.valid if mask is None else pred.valid & mask
    else:
        values = np.asarray(pred, dtype=np.float64)
    joint = _joint_mask(values.shape, target.valid, mask)
    d = values[joint]
    t = target.values[joint]
    n = d.size
    if n < 2:
        raise DegenerateTargetError(f"need at least 2 jointly valid pixels, got {n}")
    md, mt = d.mean(), t.mean()
    dc = d - md
    var = float(np.mean(dc * dc))
    if var <= (DEGENERATE_REL_STD**2) * max(float(np.mean(d * d)), 1e-300):
        sdd, sd, sdt, st = float(d @ d), float(d.sum()), float(d @ t), float(t.sum())
        a11, a22 = sdd + RIDGE_LAMBDA, n + RIDGE_LAMBDA
        det = a11 * a22 - sd * sd
        alpha = (a22 * sdt - sd * st) / det
        beta = (a11 * st - sd * sdt) / det
        return AffineFit(alpha, beta, n, degenerate=True)
    alpha = float(np.mean(dc * (t - mt))) / var
    beta = float(mt - alpha * md)
    return AffineFit(alpha, beta, n)


def _prepare(gt: Union[DepthMap, NormalizedDepth], mask: Optional[np.ndarray], shape) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gt, NormalizedDepth):
        joint = _joint_mask(shape, gt.valid, mask)
        if joint.sum() != gt.valid.sum():
            gt = normalize_gt(DepthMap(gt.denormalize(), joint))
    else:
        joint = _joint_mask(shape, gt.valid, mask)
        gt = normalize_gt(gt.masked(joint))
    return gt.values, joint


def ssimae(
    pred: Union[Tensor, np.ndarray],
    gt: Union[DepthMap, NormalizedDepth],
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Differentiable scale-and-shift-invariant mean absolute error.

    The ground truth is normalized over the jointly unmasked pixels, the
    prediction is least-squares fitted to it, and the mean absolute residual
    is returned. ``alpha`` and ``beta`` are built from ``pred`` on the tape,
    so gradients flow through the fit.

    Args:
        pred: predicted inverse depth, shape (H, W).
        gt: ground-truth depth map (normalized internally) or an already
            normalized target.
        mask: optional extra boolean mask; combined with the target validity.

    Returns:
        Scalar tensor.
    """
    pred = as_tensor(pred)
    target, joint = _prepare(gt, mask, pred.shape)
    n = int(joint.sum())
    if n < 2:
        raise DegenerateTargetError(f"need at least 2 jointly valid pixels, got {n}")
    mean_pred = pred.mean(joint)
    centered = pred - mean_pred
    var = (centered * centered).mean(joint)
    mean_sq = float(np.mean(pred.data[joint] ** 2))
    if var.item() <= (DEGENERATE_REL_STD**2) * max(mean_sq, 1e-300):
        alpha, beta = _ridge_fit(pred, target, joint, n)
    else:
        mean_t = float(target[joint].mean())
        cov = (centered * (target - mean_t)).mean(joint)
        alpha = cov / var
        beta = mean_t - alpha * mean_pred
    residual = alpha * pred + beta - target
    return residual.abs().mean(joint)


def _ridge_fit(pred: Tensor, target: np.ndarray, joint: np.ndarray, n: int) -> tuple[Tensor, Tensor]:
    sdd = (pred * pred).sum(joint)
    sd = pred.sum(joint)
    sdt = (pred * target).sum(joint)
    st = float(target[joint].sum())
    a11 = sdd + RIDGE_LAMBDA
    a22 = n + RIDGE_LAMBDA
    det = a11 * a22 - sd * sd
    alpha = (a22 * sdt - sd * st) / det
    beta = (a11 * st - sd * sdt) / det
    return alpha, beta


def ssimae_value(pred: np.ndarray, gt: Union[DepthMap, NormalizedDepth], mask: Optional[np.ndarray] = None) -> float:
    """SSIMAE as a plain float, without recording gradients."""
    target, joint = _prepare(gt, mask, np.shape(pred))
    fit = fit_scale_shift(np.asarray(pred, dtype=np.float64), NormalizedDepth(target, joint, 0.0, 1.0))
    resid = fit.apply(np.asarray(pred)[joint]) - target[joint]
    return float(np.mean(np.abs(resid)))
