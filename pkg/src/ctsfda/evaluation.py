"""Metrics, the per-scenario experiment runner and the ablation suites."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .adapt import (ScalingFactors, adapt_group, extract_features, pretrain_backbone,
                    pretrain_reconstructor, predict_proba)
from .config import RunConfig
from .datamodel import ReshapeSpec
from .ingest import DomainDataset, generate_synthetic_pair, train_test_split
from .models import Backbone, PlainWarp, UNet, WarpBlock
from .params import freeze
from .tta import TTAConfig, ensemble_predict

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

def mf1(predictions, labels, k: int) -> float:
    """Macro F1 over ``k`` classes; a class with no predictions and no instances scores 0."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= k):
        raise ValueError(f"class ids must lie in [0, {k})")
    cm = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(0) + cm.sum(1)          # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)
    return float(f1.mean())


def nn_distance_stat(target_features, source_features) -> float:
    """Mean Euclidean distance from each target row to its nearest source row."""
    t = torch.as_tensor(target_features, dtype=torch.float64)
    s = torch.as_tensor(source_features, dtype=torch.float64)
    if t.ndim != 2 or s.ndim != 2 or len(t) == 0 or len(s) == 0:
        raise ValueError("both feature sets must be non-empty [N, F] matrices")
    if t.shape[1] != s.shape[1]:
        raise ValueError(f"feature dims differ: {t.shape[1]} vs {s.shape[1]}")
    return float(torch.cdist(t, s).min(dim=1).values.mean())


# ---------------------------------------------------------------------------
# model construction

def build_reconstructor(kind: str, cfg: RunConfig, spec: ReshapeSpec) -> nn.Module:
    m = cfg.model
    if kind == "unet":
        return UNet(spec.c, m.unet_channels, m.unet_depth)
    if kind == "ae":
        return WarpBlock(spec.c, m.warp_hidden, m.codebook_size, m.code_dim)
    raise ValueError(f"unknown reconstructor kind {kind!r}")


def build_warp(kind: str, cfg: RunConfig, spec: ReshapeSpec) -> nn.Module:
    m = cfg.model
    if kind == "ae":
        return WarpBlock(spec.c, m.warp_hidden, m.codebook_size, m.code_dim)
    if kind == "unet":
        return PlainWarp(UNet(spec.c, m.unet_channels, m.unet_depth))
    raise ValueError(f"unknown warp block kind {kind!r}")


def build_backbone(cfg: RunConfig, d: int, k: int, length: int) -> Backbone:
    m = cfg.model
    return Backbone(d, k, length, m.backbone_widths, m.kernel_size, m.dropout)


# ---------------------------------------------------------------------------
# scenario runner

@dataclass
class ScenarioResult:
    scenario_id: str
    mf1_no_adapt: float
    mf1_source_replay: float
    mf1_full: float
    mf1_full_with_ia: float
    nn_distance: tuple[float, float, float]   # no-adapt, source replay, full
    mf1_source: float = float("nan")          # held-out source through the replay pipeline
    v_t: float = float("nan")
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nn_distance"] = list(self.nn_distance)
        return d


@dataclass
class Splits:
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset


def split_pair(source: DomainDataset, target: DomainDataset, cfg: RunConfig) -> Splits:
    s_tr, s_te = train_test_split(source, cfg.data.test_fraction, cfg.run.seed)
    t_tr, t_te = train_test_split(target, cfg.data.test_fraction, cfg.run.seed)
    return Splits(s_tr, s_te, t_tr.unlabeled(), t_te)


def synthetic_pair(cfg: RunConfig):
    d = cfg.data
    return generate_synthetic_pair(d.classes, d.n_per_class, d.channels, d.length, cfg.shift_config())


@dataclass
class Trained:
    theta: nn.Module
    backbone: nn.Module
    phi: Optional[nn.Module] = None
    scales: Optional[ScalingFactors] = None
    history: list = field(default_factory=list)


def pretrain_stages(source_train: DomainDataset, cfg: RunConfig, spec: ReshapeSpec,
                    reconstructor: Optional[str] = None) -> Trained:
    history: list = []
    sched = cfg.stage_schedule()
    torch.manual_seed(cfg.run.seed)    # module init must not depend on earlier RNG use
    theta = pretrain_reconstructor(source_train, spec, sched,
                                   build_reconstructor(reconstructor or cfg.model.reconstructor, cfg, spec),
                                   seed=cfg.run.seed, history=history)
    torch.manual_seed(cfg.run.seed + 1)
    backbone = pretrain_backbone(source_train, theta, spec, sched,
                                 build_backbone(cfg, source_train.d, source_train.k, source_train.length),
                                 seed=cfg.run.seed, history=history)
    return Trained(theta, backbone, history=history)


# Stage-3 variants used by the ablation suites.
VARIANTS = {
    "full": {},
    "without_sr": {"v_s": 0.0, "v_t_init": 1.0},
    "without_oc": {"train_v_t": False},
    "mse_only": {"lam": 0.0},
}


def adapt_stage(target_train: DomainDataset, pre: Trained, cfg: RunConfig, spec: ReshapeSpec,
                variant: str = "full", warp_kind: Optional[str] = None) -> Trained:
    opts = VARIANTS[variant]
    acfg = cfg.adapt_config()
    if "lam" in opts:
        acfg = type(acfg)(**{**asdict(acfg), "lam": opts["lam"]})
    scales = ScalingFactors(v_t=opts.get("v_t_init", 0.0), v_s=opts.get("v_s", 1.0))
    history = list(pre.history)
    torch.manual_seed(cfg.run.seed)
    phi = build_warp(warp_kind or cfg.model.warp_block, cfg, spec)
    phi, scales = adapt_group(target_train, pre.theta, pre.backbone, spec, acfg, phi=phi, scales=scales,
                              train_v_t=opts.get("train_v_t", True), seed=cfg.run.seed, history=history)
    return Trained(pre.theta, pre.backbone, freeze(phi), freeze(scales), history)


def evaluate(model: Trained, splits: Splits, cfg: RunConfig, spec: ReshapeSpec, scenario_id: str,
             tta: Optional[TTAConfig] = None) -> ScenarioResult:
    x, y, k = splits.target_test.series, splits.target_test.labels, splits.target_test.k
    if y is None:
        raise ValueError("evaluation needs labeled target test data")
    args = (model.theta, model.backbone, spec, model.phi, model.scales)
    scores, feats = {}, {}
    for mode in ("raw", "replay", "full"):
        scores[mode] = mf1(predict_proba(x, *args, mode=mode).argmax(1), y, k)
        feats[mode] = extract_features(x, *args, mode=mode)
    ia = ensemble_predict(x, model.theta, model.phi, model.backbone, model.scales,
                          tta or cfg.tta_config(), spec)
    source_feats = extract_features(splits.source_train.series, *args, mode="replay")
    src_mf1 = mf1(predict_proba(splits.source_test.series, *args, mode="replay").argmax(1),
                  splits.source_test.labels, k)
    return ScenarioResult(
        scenario_id=scenario_id,
        mf1_no_adapt=scores["raw"],
        mf1_source_replay=scores["replay"],
        mf1_full=scores["full"],
        mf1_full_with_ia=mf1(ia.argmax(1), y, k),
        nn_distance=tuple(nn_distance_stat(feats[m], source_feats) for m in ("raw", "replay", "full")),
        mf1_source=src_mf1,
        v_t=float(model.scales.v_t),
        seed=cfg.run.seed,
    )


def run_scenario(source: DomainDataset, target: DomainDataset, cfg: RunConfig,
                 scenario_id: str = "src→tgt", out_dir=None) -> ScenarioResult:
    """Pre-train on source, adapt on the target training split, score the target test split.

    This is post-hoc analysis and does read source data (for held-out source
    accuracy and the nearest-neighbour statistic); the adaptation stage itself
    only ever sees the unlabeled target split.
    """
    spec = cfg.reshape_spec(source.d, source.length)
    splits = split_pair(source, target, cfg)
    model = adapt_stage(splits.target_train, pretrain_stages(splits.source_train, cfg, spec), cfg, spec)
    result = evaluate(model, splits, cfg, spec, scenario_id)
    if out_dir is not None:
        write_results([result], out_dir)
    return result


# ---------------------------------------------------------------------------
# ablations

SUITES = {
    "reconstructor-config": ["AE + AE", "AE + U-net", "U-net + U-net", "U-net + AE"],
    "branch": ["CT w/o SR-branch", "CT w/o OC-branch", "Full CT"],
    "loss": ["MSE", "MSE + UR"],
    "ia-weighting": ["CT w/o IA", "IA by Entropy", "IA by CosSim"],
}

_RECON_VARIANTS = {"AE + AE": ("ae", "ae"), "AE + U-net": ("ae", "unet"),
                   "U-net + U-net": ("unet", "unet"), "U-net + AE": ("unet", "ae")}
_BRANCH_VARIANTS = {"CT w/o SR-branch": "without_sr", "CT w/o OC-branch": "without_oc", "Full CT": "full"}
_LOSS_VARIANTS = {"MSE": "mse_only", "MSE + UR": "full"}
_IA_VARIANTS = {"CT w/o IA": "off", "IA by Entropy": "entropy", "IA by CosSim": "cosine"}


@dataclass
class AblationTable:
    suite: str
    scenarios: list[str]
    rows: dict[str, list[float]]   # variant -> MF1 per scenario

    def average(self, variant: str) -> float:
        return float(np.mean(self.rows[variant]))

    def to_dict(self) -> dict:
        return {"suite": self.suite, "scenarios": self.scenarios, "rows": self.rows,
                "avg": {v: self.average(v) for v in self.rows}}


def _ia_score(model: Trained, splits: Splits, cfg: RunConfig, spec: ReshapeSpec, weighting: str) -> float:
    tcfg = cfg.tta_config()
    probs = ensemble_predict(splits.target_test.series, model.theta, model.phi, model.backbone, model.scales,
                             TTAConfig(tcfg.delta, tcfg.n, weighting), spec)
    return mf1(probs.argmax(1), splits.target_test.labels, splits.target_test.k)


def run_ablation(suite: str, pairs: Sequence[tuple[str, DomainDataset, DomainDataset]],
                 cfg: RunConfig) -> AblationTable:
    """Run every variant of ``suite`` on each ``(scenario_id, source, target)`` pair.

    Scores are target-test MF1 with the configured instance-wise weighting,
    except in the ``ia-weighting`` suite, which varies exactly that.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    rows = {v: [] for v in SUITES[suite]}
    weighting = cfg.tta.weighting
    for scenario_id, source, target in pairs:
        spec = cfg.reshape_spec(source.d, source.length)
        splits = split_pair(source, target, cfg)
        if suite == "reconstructor-config":
            pre_by_kind = {}
            for name, (recon, warp_kind) in _RECON_VARIANTS.items():
                if recon not in pre_by_kind:
                    pre_by_kind[recon] = pretrain_stages(splits.source_train, cfg, spec, recon)
                model = adapt_stage(splits.target_train, pre_by_kind[recon], cfg, spec, "full", warp_kind)
                rows[name].append(_ia_score(model, splits, cfg, spec, weighting))
            continue
        pre = pretrain_stages(splits.source_train, cfg, spec)
        if suite == "ia-weighting":
            model = adapt_stage(splits.target_train, pre, cfg, spec)
            for name, w in _IA_VARIANTS.items():
                rows[name].append(_ia_score(model, splits, cfg, spec, w))
            continue
        variants = _BRANCH_VARIANTS if suite == "branch" else _LOSS_VARIANTS
        for name, variant in variants.items():
            model = adapt_stage(splits.target_train, pre, cfg, spec, variant)
            rows[name].append(_ia_score(model, splits, cfg, spec, weighting))
    return AblationTable(suite, [p[0] for p in pairs], rows)


# ---------------------------------------------------------------------------
# result files

TABLE_ROWS = [("No adaptation", "mf1_no_adapt"), ("Source replay", "mf1_source_replay"),
              ("CT w/o IA", "mf1_full"), ("CT", "mf1_full_with_ia")]


def write_results(results: Sequence[ScenarioResult], out_dir) -> Path:
    """Write ``scenario.json``, ``table.csv`` and ``nn_distance.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict() for r in results]
    (out / "scenario.json").write_text(json.dumps(payload[0] if len(payload) == 1 else payload,
                                                  indent=2, sort_keys=True) + "\n")
    ids = [r.scenario_id for r in results]
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Algorithm", *ids, "AVG"])
        for label, attr in TABLE_ROWS:
            vals = [100 * getattr(r, attr) for r in results]
            writer.writerow([label, *(f"{v:.2f}" for v in vals), f"{np.mean(vals):.2f}"])
    with open(out / "nn_distance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "stage_index", "stage", "distance"])
        for r in results:
            for i, (stage, dist) in enumerate(zip(("no_adaptation", "source_replay", "full"), r.nn_distance)):
                writer.writerow([r.scenario_id, i, stage, f"{dist:.6f}"])
    return out


def write_ablation(table: AblationTable, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{table.suite}.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / f"ablation_{table.suite}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Variant", *table.scenarios, "AVG"])
        for name, vals in table.rows.items():
            writer.writerow([name, *(f"{100 * v:.2f}" for v in vals), f"{100 * table.average(name):.2f}"])
    return out
