"""Instance-wise, gradient-free test-time adaptation.

For each instance the source-replay scale ``v_s`` is swept over
``1 - n*delta, ..., 1 + n*delta``. Consecutive predictions are compared by
cosine similarity; the softmax of those similarities weights an ensemble of
the predictions. With ``2n + 1`` grid points there are ``2n`` consecutive
pairs, so the ensemble covers grid positions ``-n+1 .. n`` and the first point
serves only as the anchor of the first similarity.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import torch
from torch import Tensor, nn

from .adapt import compose_reconstruction, replay, warp
from .datamodel import ReshapeSpec, ShapeError
from .losses import shannon_entropy
from .params import FrozenContractError, fingerprint, require_frozen

WEIGHTINGS = ("cosine", "entropy", "off")


@dataclass(frozen=True)
class TTAConfig:
    delta: float = 0.001
    n: int = 10
    weighting: str = "cosine"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0; a zero step collapses the grid")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")


BENCHMARK_TTA = {
    "mfd": TTAConfig(0.001, 10),
    "ssc": TTAConfig(0.001, 8),
    "ucihar": TTAConfig(0.001, 3),
}


@dataclass
class StabilityEnsemble:
    grid: Tensor      # [2n+1] ascending v_s values
    probs: Tensor     # [B, 2n+1, K]
    sims: Tensor      # [B, 2n]
    weights: Tensor   # [B, 2n]
    p: Tensor         # [B, K]


def perturbation_grid(cfg: TTAConfig) -> Tensor:
    j = torch.arange(-cfg.n, cfg.n + 1, dtype=torch.float64)
    return 1.0 + j * cfg.delta


def cosine_similarity(p: Tensor, r: Tensor) -> Tensor:
    """Cosine similarity along the last axis (batched)."""
    if p.shape != r.shape:
        raise ShapeError(f"shape mismatch: {tuple(p.shape)} vs {tuple(r.shape)}")
    pn = p.norm(dim=-1)
    rn = r.norm(dim=-1)
    if (pn == 0).any() or (rn == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    return ((p * r).sum(-1) / (pn * rn)).clamp(-1.0, 1.0)


def stability_weights(sims: Tensor) -> Tensor:
    if sims.shape[-1] < 1:
        raise ValueError("need at least one similarity")
    return torch.softmax(sims, dim=-1)


def ensemble_from_probs(probs: Tensor, grid: Tensor, weighting: str = "cosine") -> StabilityEnsemble:
    """Combine per-grid-point predictions ``probs`` [B, 2n+1, K] into one distribution per row."""
    sims = cosine_similarity(probs[:, :-1], probs[:, 1:])
    if weighting == "cosine":
        weights = stability_weights(sims)
    elif weighting == "entropy":
        weights = torch.softmax(-shannon_entropy(probs[:, 1:]), dim=-1)
    elif weighting == "off":
        mid = probs.shape[1] // 2
        weights = torch.zeros_like(sims)
        weights[:, mid - 1] = 1.0   # position mid-1 of the tail is v_s == 1
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    p = (weights.unsqueeze(-1) * probs[:, 1:]).sum(1)
    return StabilityEnsemble(grid, probs, sims, weights, p)


@torch.no_grad()
def stability_ensemble(x: Tensor, theta: nn.Module, phi: nn.Module, backbone: nn.Module, scales,
                       cfg: TTAConfig, spec: ReshapeSpec) -> StabilityEnsemble:
    for module, what in ((theta, "reconstructor"), (phi, "warp block"), (backbone, "backbone"), (scales, "scaling factors")):
        require_frozen(module, what)
    before = [fingerprint(m) for m in (theta, phi, backbone, scales)]

    grid = perturbation_grid(cfg)
    u = replay(theta, spec, x)
    w, _ = warp(phi, spec, u)
    b = x.shape[0]
    # one backbone call over all grid points; eval mode keeps rows independent
    # grid scales the model's own v_s (== 1 outside ablations), so a disabled branch stays off
    stacked = torch.cat([compose_reconstruction(u, w, SimpleNamespace(v_t=scales.v_t, v_s=scales.v_s * float(v)))
                         for v in grid])
    logits = backbone(stacked).double()
    probs = logits.softmax(-1).view(len(grid), b, -1).transpose(0, 1)
    out = ensemble_from_probs(probs, grid, cfg.weighting)

    if [fingerprint(m) for m in (theta, phi, backbone, scales)] != before:
        raise FrozenContractError("test-time adaptation modified model state")
    return out


def ensemble_predict(x: Tensor, theta: nn.Module, phi: nn.Module, backbone: nn.Module, scales,
                     cfg: TTAConfig, spec: ReshapeSpec, batch_size: int = 64) -> Tensor:
    """Ensembled class probabilities [B, K] (float64) for every instance in ``x``."""
    return torch.cat([stability_ensemble(x[i:i + batch_size], theta, phi, backbone, scales, cfg, spec).p
                      for i in range(0, len(x), batch_size)])
