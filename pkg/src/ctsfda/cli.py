"""``ct-sfda`` command line: synthetic data, the three training stages, evaluation and ablations.

Exit codes: 0 success, 2 configuration or input error, 3 invariant violation
(frozen-contract breach, missing or incompatible checkpoint, source access
during adaptation), 4 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


from .adapt import DivergenceError, ScalingFactors, SourceAccessError
from .config import ConfigError, RunConfig, load_config, validate
from .datamodel import ShapeError
from .evaluation import (SUITES, Trained, adapt_stage, build_backbone, build_reconstructor, build_warp,
                         evaluate, pretrain_stages, run_ablation, split_pair, synthetic_pair, write_ablation,
                         write_results)
from .ingest import DatasetFormatError, DomainDataset, ShiftConfig, generate_synthetic_pair, load_dataset, \
    save_dataset, train_test_split
from .params import CheckpointError, FrozenContractError, freeze, load_checkpoint, read_manifest, save_checkpoint

log = logging.getLogger("ctsfda")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_DIVERGED = 0, 2, 3, 4


class StageOrderError(RuntimeError):
    """A required earlier-stage checkpoint is missing or was trained under another config."""


# ---------------------------------------------------------------------------
# scenarios and data access

@dataclass
class Scenario:
    scenario_id: str
    source_path: Optional[Path]
    target_path: Optional[Path]


def scenarios(cfg: RunConfig) -> list[Scenario]:
    d = cfg.data
    if d.root:
        out = []
        for sid in d.scenarios:
            src, sep, tgt = sid.partition("-")
            if not sep:
                raise ConfigError(f"scenario {sid!r} must look like '<source>-<target>'")
            out.append(Scenario(sid, Path(d.root) / src, Path(d.root) / tgt))
        return out
    if d.source:
        return [Scenario(cfg.run.name, Path(d.source), Path(d.target))]
    return [Scenario(cfg.run.name, None, None)]


def load_source(cfg: RunConfig, sc: Scenario) -> DomainDataset:
    if sc.source_path is None:
        return synthetic_pair(cfg)[0]
    return load_dataset(sc.source_path, role="source")


def load_target(cfg: RunConfig, sc: Scenario) -> DomainDataset:
    # never touches the source path; the synthetic pair exists only in memory
    if sc.target_path is None:
        return synthetic_pair(cfg)[1]
    return load_dataset(sc.target_path, role="target")


def training_hash(cfg: RunConfig) -> str:
    """Hash of every setting that affects trained weights (test-time settings excluded)."""
    flat = {k: v for k, v in cfg.to_flat().items() if not k.startswith("tta.")}
    text = "".join(f"{k}={v!r}\n" for k, v in flat.items())
    return hashlib.sha256(text.encode()).hexdigest()


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.run.name}-{cfg.config_hash()[:12]}"


# ---------------------------------------------------------------------------
# checkpoints

STAGES = ("reconstructor", "backbone", "warp", "scales")


def checkpoint_dir(cfg: RunConfig, sc: Scenario, stage: str) -> Path:
    return Path(cfg.run.out) / "checkpoints" / sc.scenario_id / stage


def _save(cfg, sc, stage, module, shape: dict):
    meta = {"stage": stage, "training_hash": training_hash(cfg), "config_hash": cfg.config_hash(),
            "seed": cfg.run.seed, **shape}
    save_checkpoint(module, checkpoint_dir(cfg, sc, stage), meta)


def _checked_meta(cfg: RunConfig, sc: Scenario, stage: str) -> dict:
    path = checkpoint_dir(cfg, sc, stage)
    try:
        meta = read_manifest(path)["meta"]
    except CheckpointError:
        raise StageOrderError(f"missing {stage} checkpoint at {path}; run the earlier stage first") from None
    if meta.get("training_hash") != training_hash(cfg):
        raise StageOrderError(f"{stage} checkpoint at {path} was trained under a different config")
    return meta


def has_checkpoints(cfg: RunConfig, sc: Scenario, stages=STAGES) -> bool:
    return all((checkpoint_dir(cfg, sc, s) / "params.json").is_file() for s in stages)


def load_pretrained(cfg: RunConfig, sc: Scenario) -> tuple[Trained, dict]:
    meta = _checked_meta(cfg, sc, "reconstructor")
    _checked_meta(cfg, sc, "backbone")
    spec = cfg.reshape_spec(meta["d"], meta["length"])
    theta = load_checkpoint(build_reconstructor(cfg.model.reconstructor, cfg, spec),
                            checkpoint_dir(cfg, sc, "reconstructor"))
    backbone = load_checkpoint(build_backbone(cfg, meta["d"], meta["k"], meta["length"]),
                               checkpoint_dir(cfg, sc, "backbone"))
    for name, module in (("reconstructor", theta), ("backbone", backbone)):
        if not getattr(module, "_frozen_fingerprint", None):
            raise FrozenContractError(f"{name} checkpoint is not marked frozen")
    return Trained(theta, backbone), meta


def load_adapted(cfg: RunConfig, sc: Scenario) -> tuple[Trained, dict]:
    pre, meta = load_pretrained(cfg, sc)
    _checked_meta(cfg, sc, "warp")
    _checked_meta(cfg, sc, "scales")
    spec = cfg.reshape_spec(meta["d"], meta["length"])
    phi = load_checkpoint(build_warp(cfg.model.warp_block, cfg, spec), checkpoint_dir(cfg, sc, "warp"))
    scales = load_checkpoint(ScalingFactors(), checkpoint_dir(cfg, sc, "scales"))
    return Trained(pre.theta, pre.backbone, freeze(phi), freeze(scales)), meta


# ---------------------------------------------------------------------------
# stage runners shared by the commands

def _pretrain(cfg: RunConfig, sc: Scenario) -> Trained:
    source = load_source(cfg, sc)
    s_train, _ = train_test_split(source, cfg.data.test_fraction, cfg.run.seed)
    spec = cfg.reshape_spec(source.d, source.length)
    pre = pretrain_stages(s_train, cfg, spec)
    shape = {"d": source.d, "k": source.k, "length": source.length}
    _save(cfg, sc, "reconstructor", pre.theta, shape)
    _save(cfg, sc, "backbone", pre.backbone, shape)
    return pre


def _adapt(cfg: RunConfig, sc: Scenario) -> Trained:
    pre, meta = load_pretrained(cfg, sc)
    target = load_target(cfg, sc)
    if (target.d, target.length, target.k) != (meta["d"], meta["length"], meta["k"]):
        raise DatasetFormatError(f"target shape (d={target.d}, L={target.length}, K={target.k}) does not "
                                 f"match the pre-trained models (d={meta['d']}, L={meta['length']}, K={meta['k']})")
    t_train, _ = train_test_split(target, cfg.data.test_fraction, cfg.run.seed)
    spec = cfg.reshape_spec(meta["d"], meta["length"])
    model = adapt_stage(t_train.unlabeled(), pre, cfg, spec)
    shape = {k: meta[k] for k in ("d", "k", "length")}
    _save(cfg, sc, "warp", model.phi, shape)
    _save(cfg, sc, "scales", model.scales, shape)
    return model


class _History:
    """Collects per-epoch records and writes them as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def extend(self, scenario_id: str, records):
        self.records.extend({"scenario": scenario_id, **r} for r in records)


def _write_logs(cfg: RunConfig, command: str, history: _History, summary: dict):
    out = Path(cfg.run.out) / "logs" / command
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "log.jsonl", "w") as fh:
        for rec in history.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {"command": command, "config_hash": cfg.config_hash(), "training_hash": training_hash(cfg),
               "seed": cfg.run.seed, **summary}
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(cfg.dumps())


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    shift = ShiftConfig(args.shift_amplitude, args.shift_warp, args.shift_noise, args.shift_offset, args.seed)
    src, tgt = generate_synthetic_pair(args.classes, args.n, args.channels, args.length, shift)
    out = Path(args.out)
    save_dataset(src, out / "source")
    save_dataset(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target series to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    history = _History()
    for sc in scenarios(cfg):
        pre = _pretrain(cfg, sc)
        history.extend(sc.scenario_id, pre.history)
    _write_logs(cfg, "pretrain", history, {"scenarios": [s.scenario_id for s in scenarios(cfg)]})
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, args) -> int:
    history = _History()
    v_t = {}
    for sc in scenarios(cfg):
        model = _adapt(cfg, sc)
        history.extend(sc.scenario_id, model.history)
        v_t[sc.scenario_id] = float(model.scales.v_t)
    _write_logs(cfg, "adapt", history, {"scenarios": list(v_t), "v_t": v_t})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    history = _History()
    results = []
    for sc in scenarios(cfg):
        if not has_checkpoints(cfg, sc, STAGES[:2]):
            history.extend(sc.scenario_id, _pretrain(cfg, sc).history)
        if not has_checkpoints(cfg, sc, STAGES[2:]):
            history.extend(sc.scenario_id, _adapt(cfg, sc).history)
        model, meta = load_adapted(cfg, sc)
        source, target = load_source(cfg, sc), load_target(cfg, sc)
        splits = split_pair(source, target, cfg)
        spec = cfg.reshape_spec(meta["d"], meta["length"])
        results.append(evaluate(model, splits, cfg, spec, sc.scenario_id))
    out = write_results(results, Path(cfg.run.out) / "results" / run_id(cfg))
    _write_logs(cfg, "eval", history, {"results": str(out), "scenarios": [r.to_dict() for r in results]})
    for r in results:
        print(f"{r.scenario_id}: no-adapt {100 * r.mf1_no_adapt:.2f}  replay {100 * r.mf1_source_replay:.2f}  "
              f"CT w/o IA {100 * r.mf1_full:.2f}  CT {100 * r.mf1_full_with_ia:.2f}")
    print(f"results in {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    pairs = [(sc.scenario_id, load_source(cfg, sc), load_target(cfg, sc)) for sc in scenarios(cfg)]
    table = run_ablation(args.suite, pairs, cfg)
    out = write_ablation(table, Path(cfg.run.out) / "results" / run_id(cfg))
    _write_logs(cfg, f"ablate-{args.suite}", _History(), {"results": str(out), "table": table.to_dict()})
    for name in table.rows:
        print(f"{name}: {100 * table.average(name):.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ct-sfda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic source/target pair in the container format")
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--n", type=int, default=200, help="series per class")
    synth.add_argument("--channels", type=int, default=1)
    synth.add_argument("--length", type=int, default=240)
    synth.add_argument("--shift-amplitude", type=float, default=1.0)
    synth.add_argument("--shift-warp", type=float, default=0.0)
    synth.add_argument("--shift-noise", type=float, default=0.0)
    synth.add_argument("--shift-offset", type=float, default=0.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)

    for name, text in (("pretrain", "stages 1-2: reconstructor and backbone on source data"),
                       ("adapt", "stage 3: warp block and v_t on unlabeled target data"),
                       ("eval", "score a scenario, training any missing stage first"),
                       ("ablate", "run one ablation suite")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        if name == "ablate":
            p.add_argument("--suite", required=True, choices=sorted(SUITES))
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = validate(load_config(args.config))
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FrozenContractError, SourceAccessError, StageOrderError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, DatasetFormatError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
