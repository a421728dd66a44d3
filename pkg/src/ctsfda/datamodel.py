"""Core tensor conventions and the series <-> image reshaping used by the reconstructors.

A time-series batch is a float tensor of shape ``[B, d, L]``; an image batch is
``[B, c, H, W]`` with ``c == d``. Each channel is laid out row-major into an
``H x W`` grid, with zero padding appended after the last real sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a contract requires."""


def check_series(x: Tensor, name: str = "x") -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name} must have shape [B, d, L] with all dims >= 1, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def check_labels(y: Tensor, k: int, name: str = "labels") -> Tensor:
    if y.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {tuple(y.shape)}")
    if y.dtype.is_floating_point:
        raise TypeError(f"{name} must be an integer tensor")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise ValueError(f"{name} must lie in [0, {k}), got range [{int(y.min())}, {int(y.max())}]")
    return y


@dataclass(frozen=True)
class ReshapeSpec:
    d: int
    L: int
    c: int
    H: int
    W: int
    pad_len: int

    def __post_init__(self):
        if self.c != self.d:
            raise ValueError(f"image channels {self.c} must equal series channels {self.d}")
        if self.H * self.W != self.L + self.pad_len:
            raise ValueError("H * W must equal L + pad_len")
        if self.pad_len < 0 or self.pad_len >= self.H * self.W:
            raise ValueError(f"pad_len must be in [0, H*W), got {self.pad_len}")

    @property
    def series_shape(self) -> tuple[int, int]:
        return (self.d, self.L)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.c, self.H, self.W)


def make_reshape_spec(d: int, L: int, H: int, W: int) -> ReshapeSpec:
    """Build the spec mapping ``[d, L]`` series onto ``[d, H, W]`` images.

    Raises ``ValueError`` when ``H * W < L``: the series would have to be truncated.
    """
    if d < 1 or L < 1 or H < 1 or W < 1:
        raise ValueError(f"all dimensions must be >= 1, got d={d}, L={L}, H={H}, W={W}")
    if H * W < L:
        raise ValueError(f"image {H}x{W} holds {H * W} samples, fewer than L={L}; truncation would be required")
    return ReshapeSpec(d=d, L=L, c=d, H=H, W=W, pad_len=H * W - L)


def series_to_image(x: Tensor, spec: ReshapeSpec) -> Tensor:
    check_series(x)
    if tuple(x.shape[1:]) != spec.series_shape:
        raise ShapeError(f"series shape {tuple(x.shape[1:])} does not match spec {spec.series_shape}")
    if spec.pad_len:
        x = torch.nn.functional.pad(x, (0, spec.pad_len))
    return x.reshape(x.shape[0], spec.c, spec.H, spec.W)


def image_to_series(img: Tensor, spec: ReshapeSpec) -> Tensor:
    if img.ndim != 4 or tuple(img.shape[1:]) != spec.image_shape:
        raise ShapeError(f"image shape {tuple(img.shape)} does not match spec [B, {spec.c}, {spec.H}, {spec.W}]")
    return img.reshape(img.shape[0], spec.c, spec.H * spec.W)[..., : spec.L]


# Benchmark layouts, keyed by dataset name.
BENCHMARK_SPECS = {
    "mfd": make_reshape_spec(1, 5120, 64, 80),
    "ssc": make_reshape_spec(1, 3000, 48, 64),
    "ucihar": make_reshape_spec(9, 128, 64, 64),
}
