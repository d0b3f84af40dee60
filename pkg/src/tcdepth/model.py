"""Toy fully convolutional inverse-depth network and its EMA teacher."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .autodiff import Tensor, conv2d, no_grad, relu

# (in_channels, out_channels) per 3x3 layer; relu after all but the last
ARCHITECTURE = ((3, 16), (16, 16), (16, 16), (16, 1))
KERNEL = 3
CHECKPOINT_MAGIC = b"TCDNET\x00\x01"
CHECKPOINT_VERSION = 1


def architecture_hash(layers=ARCHITECTURE, kernel: int = KERNEL) -> bytes:
    desc = f"conv{kernel}:" + ",".join(f"{i}->{o}" for i, o in layers) + ":relu-between:f64"
    return hashlib.sha256(desc.encode()).digest()


class DepthNet:
    """Four 3x3 same-padded convolutions with ReLU in between.

    Parameters are stored as a flat list ``[w0, b0, w1, b1, ...]`` of
    Tensors so optimizers and the EMA can treat them uniformly.
    """

    def __init__(self, params: list[Tensor]):
        expected = self.param_shapes()
        if [p.shape for p in params] != expected:
            raise ValueError("parameter shapes do not match the architecture")
        self.params = params

    @staticmethod
    def param_shapes() -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for cin, cout in ARCHITECTURE:
            shapes += [(cout, cin, KERNEL, KERNEL), (cout,)]
        return shapes

    @classmethod
    def init(cls, rng: np.random.Generator, final_scale: float = 1e-2, requires_grad: bool = True) -> "DepthNet":
        """Fan-in scaled uniform (Kaiming) init; the last layer is shrunk by ``final_scale``.

        ``final_scale=0`` gives an all-zero last layer, i.e. a constant output.
        """
        params = []
        for idx, (cin, cout) in enumerate(ARCHITECTURE):
            fan_in = cin * KERNEL * KERNEL
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, KERNEL, KERNEL))
            b = np.zeros(cout)
            if idx == len(ARCHITECTURE) - 1:
                w = w * final_scale
            params += [Tensor(w, requires_grad), Tensor(b, requires_grad)]
        return cls(params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, images: Union[np.ndarray, Tensor]) -> Tensor:
        """Predict inverse depth.

        Args:
            images: (H, W, 3) or a batch (N, H, W, 3).

        Returns:
            Tensor of shape (H, W) or (N, H, W).
        """
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        h = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)) - 0.5)
        n_layers = len(ARCHITECTURE)
        for i in range(n_layers):
            h = conv2d(h, self.params[2 * i], self.params[2 * i + 1])
            if i < n_layers - 1:
                h = relu(h)
        out = h[:, 0]
        return out[0] if single else out

    __call__ = forward

    def predict(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(images).data

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        offset = 0
        for p in self.params:
            p.data = vec[offset : offset + p.size].reshape(p.shape).copy()
            offset += p.size

    def copy(self, requires_grad: bool | None = None) -> "DepthNet":
        return DepthNet(
            [Tensor(p.data.copy(), p.requires_grad if requires_grad is None else requires_grad) for p in self.params]
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class ModelPair:
    """Gradient-trained fast (student) network and its slow EMA (teacher) copy."""

    fast: DepthNet
    slow: DepthNet
    ema_decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if any(p.requires_grad for p in self.slow.params):
            raise ValueError("slow model parameters must not require grad")

    @classmethod
    def from_fast(cls, fast: DepthNet, ema_decay: float = 0.999) -> "ModelPair":
        return cls(fast, fast.copy(requires_grad=False), ema_decay)

    @classmethod
    def init(cls, seed: int, ema_decay: float = 0.999, final_scale: float = 1e-2) -> "ModelPair":
        return cls.from_fast(DepthNet.init(np.random.default_rng(seed), final_scale), ema_decay)

    def copy(self) -> "ModelPair":
        return ModelPair(self.fast.copy(), self.slow.copy(requires_grad=False), self.ema_decay)


def ema_update(pair: ModelPair) -> None:
    """``slow <- decay * slow + (1 - decay) * fast`` for every parameter."""
    d = pair.ema_decay
    for s, f in zip(pair.slow.params, pair.fast.params):
        s.data = d * s.data + (1.0 - d) * f.data


def save_checkpoint(net: DepthNet, path: Union[str, Path]) -> None:
    """Write magic, version, architecture hash, parameter count and an f64 blob."""
    blob = net.flat().astype("<f8").tobytes()
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + architecture_hash()
    header += struct.pack("<Q", net.n_params)
    Path(path).write_bytes(header + blob)


def load_checkpoint(path: Union[str, Path], requires_grad: bool = True) -> DepthNet:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a depth-net checkpoint")
    (version,) = struct.unpack_from("<I", raw, head)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[head + 4 : head + 36]
    if digest != architecture_hash():
        raise ValueError(f"{path}: architecture hash mismatch")
    (count,) = struct.unpack_from("<Q", raw, head + 36)
    data = raw[head + 44 :]
    if len(data) != 8 * count:
        raise ValueError(f"{path}: truncated parameter blob ({len(data)} bytes for {count} values)")
    net = DepthNet.init(np.random.default_rng(0), requires_grad=requires_grad)
    net.load_flat(np.frombuffer(data, dtype="<f8"))
    return net
