"""Tiny layer kit over the autodiff engine: parameter containers and init.

Modules are plain attribute bags; parameters are discovered by scanning
instance attributes in insertion order, which fixes a deterministic
checkpoint layout without any registration boilerplate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, DimensionError


class Module:
    """Base parameter container with named traversal and state I/O."""

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{key}.{i}", item

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state(self, named: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(named)
        extra = set(named) - set(own)
        if missing or extra:
            raise CheckpointError(
                f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, t in own.items():
            arr = np.asarray(named[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}"
                )
            t.data = arr.copy()


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = _param(rng, (d_in, d_out), np.sqrt(2.0 / d_in))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = _param(rng, (c_out, c_in, kernel, kernel), np.sqrt(2.0 / fan_in))
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + ad.reshape(self.bias, (1, -1, 1, 1))
        return y


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = _param(rng, (c_in, c_out, kernel, kernel), np.sqrt(2.0 / fan_in))
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv_transpose2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + ad.reshape(self.bias, (1, -1, 1, 1))
        return y


class LayerNorm(Module):
    """Normalization along the last axis with a learned affine."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_normalize(x, axis=-1, eps=self.eps) * self.gain + self.shift


class SwiGluAdapter(Module):
    """Gated MLP: out = x + W_out(silu(W_gate x) * (W_val x))."""

    def __init__(self, rng, dim: int, hidden: int | None = None):
        hidden = hidden or dim
        self.gate = Linear(rng, dim, hidden)
        self.value = Linear(rng, dim, hidden)
        self.out = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.out(ad.silu_gate(self.gate(x), self.value(x)))


class LearnedUpsample(Module):
    """Learned 4x spatial expansion via a stride-4 transposed convolution."""

    def __init__(self, rng, c_in: int, c_out: int, factor: int = 4):
        self.deconv = ConvTranspose2d(rng, c_in, c_out, kernel=factor, stride=factor)
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return self.deconv(x)


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resample x[C,H,W] to [C,H',W'] (pixel-center mapping, edges clamped)."""
    if x.ndim != 3:
        raise DimensionError(f"resize_bilinear expects [C,H,W], got {x.shape}")
    _, h, w = x.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return x
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    grid = np.stack(np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1)), axis=-1)
    out, _ = ad.bilinear_sample(x, grid)
    return out
