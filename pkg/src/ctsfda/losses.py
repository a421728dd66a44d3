"""Scalar objectives for pre-training and group-level adaptation."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .datamodel import ShapeError

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class AdaptConfig:
    lam: float = 0.1          # weight of the uncertainty-reduction term
    q: float = 2.0            # Tsallis exponent
    learning_rate: float = 5e-3
    epochs: int = 8
    batch_size: int = 32
    codebook_weight: float = 1.0
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.lam < 0 or self.learning_rate < 0:
            raise ValueError("lam and learning_rate must be >= 0")
        if not self.q > 1:
            raise ValueError("Tsallis exponent q must be > 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def mse_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Per-element mean squared error, averaged per sample and then over the batch."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).mean(1).mean()


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


def check_simplex(probs: Tensor, tol: float = SIMPLEX_TOL) -> Tensor:
    if probs.ndim != 2:
        raise ShapeError(f"expected [B, K] probabilities, got {tuple(probs.shape)}")
    if (probs < 0).any() or ((probs.sum(1) - 1).abs() > tol).any():
        raise ValueError("every row must be a probability vector (nonnegative, summing to 1)")
    return probs


def tsallis_ur_loss(probs: Tensor, q: float = 2.0, validate: bool = True) -> Tensor:
    """Batch mean of the Tsallis entropy ``(1 - sum_k p_k^q) / (q - 1)``."""
    if not q > 1:
        raise ValueError("q must be > 1")
    if validate:
        check_simplex(probs.detach())
    return ((1.0 - probs.pow(q).sum(1)) / (q - 1.0)).mean()


def shannon_entropy(probs: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise Shannon entropy in nats."""
    return -(probs * torch.log(probs.clamp_min(eps))).sum(-1)


def overall_adapt_loss(x_t: Tensor, x_hat_t: Tensor, probs: Tensor, cfg: AdaptConfig,
                       vq_aux: Tensor | float = 0.0) -> Tensor:
    """Reconstruction MSE plus ``lam`` times the uncertainty term plus any VQ auxiliary loss."""
    loss = mse_loss(x_t, x_hat_t)
    if cfg.lam:
        loss = loss + cfg.lam * tsallis_ur_loss(probs, cfg.q)
    return loss + vq_aux
