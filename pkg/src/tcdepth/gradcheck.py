"""Central finite-difference gradient oracles.

``numerical_gradient`` is the generic loop used for small functions. For the
toy network, ``network_fd_gradient`` evaluates every ±h parameter
perturbation as one batched forward pass: a perturbation only changes its
own layer's pre-activation by ``±h`` times a shifted input window, so the
perturbed pre-activations are formed directly and pushed through the
remaining layers together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .align import DepthMap, normalize_gt
from .flowgeom import MaskConfig
from .losses import (
    AugmentParams,
    FramePair,
    LossItem,
    augmentation_consistency_loss,
    augmentation_items,
    supervised_items,
    supervised_loss,
    temporal_consistency_loss,
    temporal_items,
)
from .model import ARCHITECTURE, KERNEL, DepthNet, ModelPair
from .synth import Camera, Scene, camera_path, render, disparity_gt, trajectory

logger = logging.getLogger(__name__)

DEFAULT_H = 1e-5
_CHUNK = 2048
LOSS_NAMES = ("sup", "aug", "temp")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|analytic - numeric| / max(1, |numeric|)`` elementwise."""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = DEFAULT_H) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. every element of ``arrays`` (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f()
            flat[i] = orig - h
            minus = f()
            flat[i] = orig
            gf[i] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[..., i, j] = x[..., i + dy, j + dx]`` with zeros outside."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[..., ys, xs] = x[..., ys_src, xs_src]
    return out


def direct_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Reference same-padded cross-correlation of a (N, C, H, W) batch over sliding windows."""
    r = weight.shape[2] // 2
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, weight.shape[2:], axis=(2, 3))  # (N, C, H, W, ky, kx)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, O)
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def _forward_from(
    params: list[np.ndarray], layer: int, pre: np.ndarray, base_pres: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Finish the network given layer ``layer``'s pre-activation (P, O, H, W).

    Also reports, per batch entry, whether any ReLU input changed sign
    relative to the unperturbed pass ``base_pres``.
    """
    n_layers = len(ARCHITECTURE)
    h = pre
    crossed = np.zeros(pre.shape[0], dtype=bool)
    for i in range(layer, n_layers):
        if i > layer:
            h = direct_conv(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            crossed |= ((h > 0) != (base_pres[i] > 0)).reshape(h.shape[0], -1).any(axis=1)
            h = np.maximum(h, 0.0)
    return h[:, 0], crossed


def _ssimae_terms(preds: np.ndarray, target: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    norm = normalize_gt(target)
    m = norm.valid
    t = norm.values[m]
    d = preds[:, m]
    md = d.mean(axis=1, keepdims=True)
    dc = d - md
    var = (dc * dc).mean(axis=1)
    cov = (dc * (t - t.mean())[None]).mean(axis=1)
    alpha = cov / var
    beta = t.mean() - alpha * md[:, 0]
    resid = alpha[:, None] * d + beta[:, None] - t[None]
    return np.abs(resid).mean(axis=1), resid > 0


def batched_ssimae(preds: np.ndarray, target: DepthMap) -> np.ndarray:
    """SSIMAE of each prediction in a (P, H, W) stack against one target."""
    return _ssimae_terms(preds, target)[0]


@dataclass
class FDGradient:
    """Central differences per parameter, flagged where the ±h stencil crosses a kink."""

    grad: np.ndarray
    crossed: np.ndarray

    @property
    def smooth(self) -> bool:
        return not self.crossed.any()


def network_fd_gradient(net: DepthNet, image: np.ndarray, target: DepthMap, h: float = DEFAULT_H) -> FDGradient:
    """Central-difference gradient of ``SSIMAE(net(image), target)`` for every parameter.

    Entries are ordered like ``net.flat()``. A parameter is flagged as
    crossed when its +h or -h evaluation flips the sign of a ReLU input or
    of an absolute residual; there the loss is not differentiable within the
    stencil and the difference quotient is not a derivative estimate.
    """
    params = [p.data for p in net.params]
    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None] - 0.5
    acts = [x]  # input to each layer
    pres = []
    n_layers = len(ARCHITECTURE)
    for i in range(n_layers):
        z = direct_conv(acts[-1], params[2 * i], params[2 * i + 1])
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if i < n_layers - 1 else z)
    _, base_sign = _ssimae_terms(acts[-1][:, 0], target)

    r = KERNEL // 2
    grads, crossings = [], []
    for layer, (cin, cout) in enumerate(ARCHITECTURE):
        a = acts[layer][0]
        z = pres[layer][0]
        deltas = []  # (channel, delta map) per parameter, weights then bias
        for o in range(cout):
            for c in range(cin):
                for ky in range(KERNEL):
                    for kx in range(KERNEL):
                        deltas.append((o, _shift(a[c], ky - r, kx - r)))
        for o in range(cout):
            deltas.append((o, np.ones(z.shape[1:])))
        g = np.empty(len(deltas))
        crossed = np.empty(len(deltas), dtype=bool)
        for start in range(0, len(deltas), _CHUNK):
            chunk = deltas[start : start + _CHUNK]
            n = len(chunk)
            stack = np.broadcast_to(z, (2 * n,) + z.shape).copy()
            for j, (o, dmap) in enumerate(chunk):
                stack[j, o] += h * dmap
                stack[n + j, o] -= h * dmap
            preds, relu_flip = _forward_from(params, layer, stack, pres)
            losses, sign = _ssimae_terms(preds, target)
            flip = relu_flip | (sign != base_sign).any(axis=1)
            g[start : start + n] = (losses[:n] - losses[n:]) / (2 * h)
            crossed[start : start + n] = flip[:n] | flip[n:]
        n_w = cout * cin * KERNEL * KERNEL
        grads += [g[:n_w], g[n_w:]]
        crossings += [crossed[:n_w], crossed[n_w:]]
    return FDGradient(np.concatenate(grads), np.concatenate(crossings))


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_params: int
    draw: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


class KinkError(RuntimeError):
    """No draw of oracle inputs kept every finite-difference stencil smooth."""


def oracle_inputs(rng: np.random.Generator, size: tuple[int, int] = (8, 8)) -> dict:
    """Small rendered inputs for all three losses: an image with disparity, and a 2-frame clip."""
    focal = 1.25 * size[1]
    scene = Scene(
        base_depth=2.0,
        slope=tuple(rng.uniform(-0.3, 0.3, size=2)),
        amplitude=0.3,
        texture_seed=int(rng.integers(1 << 30)),
        texture_freq=rng.uniform(3.0, 6.0),
    )
    cam = Camera.centered(focal, size)
    frame = render(scene, cam, size)
    velocity = np.append(rng.uniform(-2.0, 2.0, size=2), 0.0)
    cams, ts = camera_path(cam, 2, velocity)
    clip = trajectory(scene, cams, ts, size)
    fp = FramePair(clip.frames[0], clip.frames[1], ts[0], ts[1], clip.flow(0, 1), clip.flow(1, 0))
    return {
        "image": frame.image,
        "disparity": disparity_gt(frame, focal, 0.1),
        "aug": AugmentParams.sample(rng, size),
        "frame_pair": fp,
    }


def _case(name: str, pair: ModelPair, inputs: dict) -> tuple[LossItem, object]:
    """The loss item a loss compares against, and a callable computing that loss on the tape."""
    if name == "sup":
        (item,) = supervised_items([inputs["image"]], [inputs["disparity"]])
        return item, lambda: supervised_loss(pair, inputs["image"], inputs["disparity"])
    if name == "aug":
        (item,) = augmentation_items(pair, [inputs["image"]], [inputs["aug"]])
        return item, lambda: augmentation_consistency_loss(pair, inputs["image"], inputs["aug"])
    if name == "temp":
        cfg = MaskConfig()
        (item,) = temporal_items(pair, [inputs["frame_pair"]], cfg)
        return item, lambda: temporal_consistency_loss(pair, inputs["frame_pair"], cfg)
    raise ValueError(f"unknown loss {name!r}")


def check_seed(
    seed: int, size: tuple[int, int] = (8, 8), h: float = DEFAULT_H, max_draws: int = 20
) -> list[GradCheckResult]:
    """Compare backprop against central differences for every parameter and every loss.

    The network gets a unit-scale final layer so that every parameter
    receives a non-trivial gradient. Network and inputs come from the stream
    ``(seed, draw)``; a draw is rejected when any ±h stencil crosses a ReLU
    or absolute-value kink, where no derivative exists to compare against.

    Raises:
        KinkError: ``max_draws`` consecutive draws all crossed a kink.
    """
    for draw in range(max_draws):
        rng = np.random.default_rng([seed, draw])
        pair = ModelPair.from_fast(DepthNet.init(rng, final_scale=1.0))
        inputs = oracle_inputs(rng, size)
        out = []
        for name in LOSS_NAMES:
            item, loss_fn = _case(name, pair, inputs)
            fd = network_fd_gradient(pair.fast, item.student_input, item.target, h)
            if not fd.smooth:
                logger.info("seed %d draw %d: %s stencil crosses a kink, redrawing", seed, draw, name)
                break
            pair.fast.zero_grad()
            loss_fn().backward()
            analytic = np.concatenate([p.grad.ravel() for p in pair.fast.params])
            out.append(GradCheckResult(name, float(relative_error(analytic, fd.grad).max()), analytic.size, draw))
        else:
            return out
    raise KinkError(f"seed {seed}: {max_draws} draws all crossed a kink")


def run_gradcheck(seeds: Sequence[int] = range(10), size: tuple[int, int] = (8, 8)) -> list[tuple[int, GradCheckResult]]:
    return [(seed, r) for seed in seeds for r in check_seed(seed, size)]
