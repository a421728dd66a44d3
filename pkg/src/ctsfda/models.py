"""Trainable networks: U-net reconstructor, VQ warp block, 1D-CNN classification backbone."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .datamodel import ShapeError


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Image-to-image U-net: ``depth`` down/up levels with skip concatenation.

    Channel width doubles at every level starting from ``base_channels``; a final
    1x1 convolution maps back to ``in_channels`` so the output has the input shape.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 16, depth: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.in_channels = in_channels
        self.depth = depth
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        prev = in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(prev, w))
            prev = w
        self.bottom = _double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for w_hi, w_lo in zip(reversed(widths[1:]), reversed(widths[:-1])):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.up_conv.append(_double_conv(2 * w_lo, w_lo))
        self.head = nn.Conv2d(widths[0], in_channels, 1)

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != self.in_channels:
            raise ShapeError(f"expected [B, {self.in_channels}, H, W], got {tuple(img.shape)}")
        step = 2 ** self.depth
        if img.shape[2] % step or img.shape[3] % step:
            raise ShapeError(f"spatial dims {tuple(img.shape[2:])} must be divisible by {step}")
        skips = []
        h = img
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottom(h)
        for up, conv, skip in zip(self.up, self.up_conv, reversed(skips)):
            h = conv(torch.cat([up(h), skip], dim=1))
        return self.head(h)


class VQOutput(NamedTuple):
    reconstructed: Tensor
    codebook_loss: Tensor
    commitment_loss: Tensor
    code_indices: Tensor


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook lookup with a straight-through gradient."""

    def __init__(self, n_codes: int = 32, code_dim: int = 8):
        super().__init__()
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.codebook = nn.Parameter(torch.empty(n_codes, code_dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))

    def nearest(self, flat: Tensor) -> Tensor:
        """Index of the closest codebook row (Euclidean) for every row of ``flat``."""
        dist = (flat.pow(2).sum(1, keepdim=True)
                - 2 * flat @ self.codebook.t()
                + self.codebook.pow(2).sum(1)[None, :])
        return dist.argmin(dim=1)

    def forward(self, z: Tensor):
        # z: [B, D, h, w]
        b, dim, h, w = z.shape
        if dim != self.code_dim:
            raise ShapeError(f"encoder output has {dim} channels, codebook dim is {self.code_dim}")
        flat = z.permute(0, 2, 3, 1).reshape(-1, dim)
        idx = self.nearest(flat.detach())
        q = self.codebook[idx].view(b, h, w, dim).permute(0, 3, 1, 2)
        codebook_loss = F.mse_loss(q, z.detach())
        commitment_loss = F.mse_loss(z, q.detach())
        q_st = z + (q - z).detach()
        return q_st, codebook_loss, commitment_loss, idx.view(b, h, w)


class WarpBlock(nn.Module):
    """Small VQ autoencoder: conv encoder (2x down) -> vector quantizer -> conv decoder."""

    def __init__(self, in_channels: int = 1, hidden: int = 16, n_codes: int = 32, code_dim: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, code_dim, 1),
        )
        self.quantizer = VectorQuantizer(n_codes, code_dim)
        self.decoder = nn.Sequential(
            nn.Conv2d(code_dim, hidden, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, in_channels, 3, padding=1),
        )

    def forward(self, img: Tensor) -> VQOutput:
        if img.ndim != 4 or img.shape[1] != self.in_channels or img.shape[2] % 2 or img.shape[3] % 2:
            raise ShapeError(f"expected [B, {self.in_channels}, H, W] with even H, W; got {tuple(img.shape)}")
        q, cb, commit, idx = self.quantizer(self.encoder(img))
        return VQOutput(self.decoder(q), cb, commit, idx)


class PlainWarp(nn.Module):
    """Adapter giving a plain image-to-image network the warp-block output type."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net

    def forward(self, img: Tensor) -> VQOutput:
        zero = img.new_zeros(())
        return VQOutput(self.net(img), zero, zero, img.new_zeros((0,), dtype=torch.long))


def reconstruct(net: nn.Module, img: Tensor, codebook_weight: float = 1.0,
                commitment_weight: float = 0.25) -> tuple[Tensor, Tensor]:
    """Run any reconstructor; return ``(output, auxiliary VQ loss)`` (zero for non-VQ nets)."""
    out = net(img)
    if isinstance(out, VQOutput):
        return out.reconstructed, codebook_weight * out.codebook_loss + commitment_weight * out.commitment_loss
    return out, img.new_zeros(())


class Backbone(nn.Module):
    """1D-CNN encoder (three conv blocks, adaptive average pooling) plus a linear classifier."""

    def __init__(self, in_channels: int, n_classes: int, length: int,
                 widths: Sequence[int] = (64, 128, 128), kernel_size: int = 8, dropout: float = 0.2):
        super().__init__()
        self.in_channels = in_channels
        self.length = length
        self.n_classes = n_classes
        blocks = []
        prev = in_channels
        for w in widths:
            blocks += [
                nn.Conv1d(prev, w, kernel_size, padding=kernel_size // 2, bias=False),
                nn.BatchNorm1d(w),
                nn.ReLU(),
                nn.MaxPool1d(2, stride=2, padding=1),
                nn.Dropout(dropout),
            ]
            prev = w
        self.encoder = nn.Sequential(*blocks, nn.AdaptiveAvgPool1d(1), nn.Flatten())
        self.feature_dim = prev
        self.classifier = nn.Linear(prev, n_classes)

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels or x.shape[2] != self.length:
            raise ShapeError(f"expected [B, {self.in_channels}, {self.length}], got {tuple(x.shape)}")
        return self.encoder(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.features(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
