"""Source pre-training and source-free group-level adaptation.

Stage 1 trains the reconstructor on source images, stage 2 trains the backbone
on the frozen reconstructor's output, stage 3 trains the warp block and the
offset-branch scale ``v_t`` on unlabeled target data only. The composed
reconstruction is ``v_t * warp(u) + v_s * u`` with ``u`` the frozen
reconstructor's output, both taken back to series space.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor, nn

from .datamodel import ReshapeSpec, ShapeError, image_to_series, series_to_image
from .ingest import DomainDataset
from .losses import AdaptConfig, cross_entropy, mse_loss, tsallis_ur_loss
from .models import Backbone, UNet, WarpBlock, reconstruct
from .params import FrozenContractError, assert_frozen, freeze, require_frozen

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, epoch: int, detail: str = ""):
        super().__init__(f"{stage}: loss became non-finite at epoch {epoch}{': ' + detail if detail else ''}")
        self.stage = stage
        self.epoch = epoch


class SourceAccessError(RuntimeError):
    """Adaptation was handed data tagged as source."""


class ScalingFactors(nn.Module):
    """Branch weights: ``v_s`` (source replay, a fixed buffer) and ``v_t`` (offset branch, trainable)."""

    def __init__(self, v_t: float = 0.0, v_s: float = 1.0):
        super().__init__()
        self.v_t = nn.Parameter(torch.tensor(float(v_t)))
        self.register_buffer("v_s", torch.tensor(float(v_s)))

    def extra_repr(self):
        return f"v_t={self.v_t.item():.6g}, v_s={self.v_s.item():.6g}"


@dataclass(frozen=True)
class StageSchedule:
    """(learning rate, epochs) for the reconstructor, backbone and adaptation stages."""

    reconstructor: tuple[float, int] = (5e-3, 8)
    backbone: tuple[float, int] = (2e-3, 20)
    adaptation: tuple[float, int] = (5e-3, 8)
    batch_size: int = 32

    def __post_init__(self):
        for lr, epochs in (self.reconstructor, self.backbone, self.adaptation):
            if not lr > 0 or epochs < 1:
                raise ValueError("every stage needs a positive learning rate and epoch count")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


BENCHMARK_SCHEDULES = {
    "mfd": StageSchedule((5e-3, 8), (2e-3, 20), (5e-3, 8)),
    "ssc": StageSchedule((5e-3, 8), (2e-3, 15), (5e-3, 15)),
    "ucihar": StageSchedule((5e-4, 15), (5e-3, 15), (5e-3, 8)),
}


def compose_reconstruction(u: Tensor, w: Tensor, s) -> Tensor:
    """``s.v_t * w + s.v_s * u`` elementwise; ``s`` is anything with ``v_t``/``v_s`` attributes."""
    if u.shape != w.shape:
        raise ShapeError(f"branch outputs differ in shape: {tuple(u.shape)} vs {tuple(w.shape)}")
    return s.v_t * w + s.v_s * u


def replay(theta: nn.Module, spec: ReshapeSpec, x: Tensor) -> Tensor:
    """Source-replay branch output in series space."""
    out, _ = reconstruct(theta, series_to_image(x, spec))
    return image_to_series(out, spec)


def warp(phi: nn.Module, spec: ReshapeSpec, u: Tensor, cfg: AdaptConfig = AdaptConfig()):
    """Offset-branch output in series space plus its auxiliary VQ loss."""
    out, aux = reconstruct(phi, series_to_image(u, spec), cfg.codebook_weight, cfg.commitment_weight)
    return image_to_series(out, spec), aux


@torch.no_grad()
def replay_all(theta: nn.Module, spec: ReshapeSpec, x: Tensor, batch_size: int = 256) -> Tensor:
    return torch.cat([replay(theta, spec, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _check_finite(value: float, stage: str, epoch: int):
    if not math.isfinite(value):
        raise DivergenceError(stage, epoch)


def pretrain_reconstructor(source: DomainDataset, spec: ReshapeSpec, sched: StageSchedule = StageSchedule(),
                           net: Optional[nn.Module] = None, seed: int = 0,
                           history: Optional[list] = None) -> nn.Module:
    """Stage 1: fit the reconstructor to source images by MSE, then freeze it."""
    torch.manual_seed(seed)
    if net is None:
        net = UNet(spec.c)
    lr, epochs = sched.reconstructor
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    images = series_to_image(source.series, spec)
    net.train()
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(images), sched.batch_size, gen):
            img = images[idx]
            out, aux = reconstruct(net, img)
            loss = mse_loss(img, out) + aux
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            _check_finite(total, "reconstructor", epoch)
        record = {"stage": "reconstructor", "epoch": epoch, "mse": total / len(images)}
        log.info("%s", record)
        if history is not None:
            history.append(record)
    return freeze(net)


def pretrain_backbone(source: DomainDataset, theta: nn.Module, spec: ReshapeSpec,
                      sched: StageSchedule = StageSchedule(), backbone: Optional[nn.Module] = None,
                      seed: int = 0, history: Optional[list] = None) -> nn.Module:
    """Stage 2: train the classifier with cross-entropy on the frozen reconstructor's output."""
    require_frozen(theta, "reconstructor")
    if source.labels is None:
        raise ValueError("backbone pre-training needs labeled source data")
    torch.manual_seed(seed)
    if backbone is None:
        backbone = Backbone(source.d, source.k, source.length)
    x = replay_all(theta, spec, source.series)
    y = source.labels
    lr, epochs = sched.backbone
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed + 1)
    backbone.train()
    for epoch in range(epochs):
        total, correct = 0.0, 0
        for idx in _batches(len(x), sched.batch_size, gen):
            logits = backbone(x[idx])
            loss = cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
            _check_finite(total, "backbone", epoch)
        record = {"stage": "backbone", "epoch": epoch, "ce": total / len(x), "train_acc": correct / len(x)}
        log.info("%s", record)
        if history is not None:
            history.append(record)
    if not assert_frozen(theta):
        raise FrozenContractError("reconstructor changed during backbone pre-training")
    return freeze(backbone)


def adapt_group(target: DomainDataset, theta: nn.Module, backbone: nn.Module, spec: ReshapeSpec,
                cfg: AdaptConfig = AdaptConfig(), phi: Optional[nn.Module] = None,
                scales: Optional[ScalingFactors] = None, train_v_t: bool = True, seed: int = 0,
                history: Optional[list] = None,
                on_step: Optional[Callable[[int], None]] = None) -> tuple[nn.Module, ScalingFactors]:
    """Stage 3: train the warp block and ``v_t`` on unlabeled target data.

    Only the target dataset is passed in; anything tagged ``role="source"`` is
    rejected. The reconstructor and backbone must already be frozen and stay
    bit-identical. Returns the trained ``(phi, scales)``.
    """
    if target.role == "source":
        raise SourceAccessError("adapt_group received a dataset tagged as source")
    require_frozen(theta, "reconstructor")
    require_frozen(backbone, "backbone")
    torch.manual_seed(seed)
    if phi is None:
        phi = WarpBlock(spec.c)
    if scales is None:
        scales = ScalingFactors()
    v_s_before = scales.v_s.clone()
    scales.v_t.requires_grad_(train_v_t)

    x = target.series
    u_all = replay_all(theta, spec, x)
    trainable = [p for p in phi.parameters() if p.requires_grad]
    if train_v_t:
        trainable.append(scales.v_t)
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed + 2)
    phi.train()
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"mse": 0.0, "ur": 0.0, "vq": 0.0}
        for idx in _batches(len(x), cfg.batch_size, gen):
            u = u_all[idx]
            w, aux = warp(phi, spec, u, cfg)
            x_hat = compose_reconstruction(u, w, scales)
            probs = backbone(x_hat).softmax(1)
            mse = mse_loss(x[idx], x_hat)
            ur = tsallis_ur_loss(probs, cfg.q, validate=False)
            loss = mse + cfg.lam * ur + aux
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step)
            for key, val in (("mse", mse), ("ur", ur), ("vq", aux)):
                sums[key] += float(val.detach() if torch.is_tensor(val) else val) * len(idx)
            _check_finite(sum(sums.values()), "adaptation", epoch)
        record = {"stage": "adaptation", "epoch": epoch, "v_t": scales.v_t.item(),
                  **{k: v / len(x) for k, v in sums.items()}}
        log.info("%s", record)
        if history is not None:
            history.append(record)

    if not torch.equal(scales.v_s, v_s_before):
        raise FrozenContractError("v_s changed during group adaptation")
    require_frozen(theta, "reconstructor")
    require_frozen(backbone, "backbone")
    phi.eval()
    return phi, scales


@torch.no_grad()
def predict_proba(x: Tensor, theta: nn.Module, backbone: nn.Module, spec: ReshapeSpec,
                  phi: Optional[nn.Module] = None, scales=None, mode: str = "full",
                  batch_size: int = 256) -> Tensor:
    """Class probabilities for ``x`` under one of three pipelines.

    ``mode``: ``"raw"`` (backbone on the input), ``"replay"`` (backbone on the
    frozen reconstructor's output) or ``"full"`` (composed reconstruction).
    """
    return torch.cat([_pipeline(x[i:i + batch_size], theta, backbone, spec, phi, scales, mode, logits=True)
                      .softmax(1) for i in range(0, len(x), batch_size)])


@torch.no_grad()
def extract_features(x: Tensor, theta: nn.Module, backbone: Backbone, spec: ReshapeSpec,
                     phi: Optional[nn.Module] = None, scales=None, mode: str = "full",
                     batch_size: int = 256) -> Tensor:
    return torch.cat([_pipeline(x[i:i + batch_size], theta, backbone, spec, phi, scales, mode, logits=False)
                      for i in range(0, len(x), batch_size)])


def pipeline_input(x, theta, spec, phi=None, scales=None, mode="full") -> Tensor:
    if mode == "raw":
        return x
    u = replay(theta, spec, x)
    if mode == "replay":
        return u
    if mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    w, _ = warp(phi, spec, u)
    return compose_reconstruction(u, w, scales)


def _pipeline(x, theta, backbone, spec, phi, scales, mode, logits):
    inp = pipeline_input(x, theta, spec, phi, scales, mode)
    return backbone(inp) if logits else backbone.features(inp)
