import json
import sys
from pathlib import Path

import pytest

from ctsfda.cli import main, training_hash
from ctsfda.config import load_config
from ctsfda.ingest import load_dataset

# small but complete pipeline; each command finishes in seconds
FAST = """\
preset = fixture
data.classes = 3
data.n_per_class = 20
data.length = 60
reshape.height = 8
reshape.width = 8
model.unet_channels = 4
model.unet_depth = 2
model.warp_hidden = 4
model.backbone_widths = 8, 8, 8
model.kernel_size = 5
schedule.stage1_epochs = 1
schedule.stage2_epochs = 2
schedule.stage3_epochs = 1
tta.n = 2
"""


def write_cfg(tmp_path, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(FAST + f"run.out = {tmp_path / 'out'}\n" + extra)
    return path


def test_synth_writes_mfd_shaped_pair(tmp_path):
    assert main(["synth", "--classes", "3", "--n", "2", "--length", "5120", "--out", str(tmp_path)]) == 0
    src = load_dataset(tmp_path / "source")
    assert src.series.shape == (6, 1, 5120) and src.k == 3


def test_synth_identity_and_determinism(tmp_path):
    args = ["synth", "--n", "5", "--length", "64", "--seed", "7", "--shift-amplitude", "1.0", "--shift-noise", "0"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    a = tmp_path / "a"
    assert (a / "source" / "series.bin").read_bytes() == (a / "target" / "series.bin").read_bytes()
    for part in ("source", "target"):
        for f in ("series.bin", "labels.bin", "manifest.json"):
            assert (a / part / f).read_bytes() == (tmp_path / "b" / part / f).read_bytes()


def test_synth_invalid_flags(tmp_path):
    assert main(["synth", "--n", "0", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--classes", "many", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("tta.delta = 0\n")
    assert main(["eval", "--config", str(bad)]) == 2
    bad.write_text("nonsense.key = 1\n")
    assert main(["eval", "--config", str(bad)]) == 2


def test_adapt_without_checkpoints_is_hard_error(tmp_path, capsys):
    assert main(["adapt", "--config", str(write_cfg(tmp_path))]) == 3
    assert "missing reconstructor checkpoint" in capsys.readouterr().err


def test_stage_hash_mismatch(tmp_path, capsys):
    assert main(["pretrain", "--config", str(write_cfg(tmp_path))]) == 0
    changed = write_cfg(tmp_path, "schedule.stage2_epochs = 3\n", "changed.cfg")
    assert main(["adapt", "--config", str(changed)]) == 3
    assert "different config" in capsys.readouterr().err


def test_seed_env_override(tmp_path, monkeypatch):
    cfg_path = write_cfg(tmp_path)
    monkeypatch.setenv("CT_SFDA_SEED", "42")
    cfg = load_config(cfg_path)
    assert cfg.run.seed == 42
    monkeypatch.delenv("CT_SFDA_SEED")
    assert training_hash(load_config(cfg_path)) != training_hash(cfg)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    main(["synth", "--n", "20", "--length", "60", "--shift-amplitude", "1.3", "--shift-noise", "0.2",
          "--shift-offset", "0.3", "--out", str(root)])
    return root


def test_staged_commands_with_source_audit(tmp_path, data_dir):
    cfg_path = write_cfg(tmp_path, f"data.source = {data_dir / 'source'}\ndata.target = {data_dir / 'target'}\n")
    assert main(["pretrain", "--config", str(cfg_path)]) == 0

    source_root = str((data_dir / "source").resolve())
    opened = []
    armed = [True]

    def hook(event, args):
        if armed[0] and event == "open" and args and isinstance(args[0], (str, bytes, Path)):
            path = str(Path(args[0] if not isinstance(args[0], bytes) else args[0].decode()).resolve())
            if path.startswith(source_root):
                opened.append(path)

    sys.addaudithook(hook)
    try:
        assert main(["adapt", "--config", str(cfg_path)]) == 0
    finally:
        armed[0] = False
    assert opened == []

    ckpt = tmp_path / "out" / "checkpoints" / "scenario"
    assert {p.name for p in ckpt.iterdir()} == {"reconstructor", "backbone", "warp", "scales"}
    logs = (tmp_path / "out" / "logs" / "adapt" / "log.jsonl").read_text().splitlines()
    assert len(logs) == 1 and json.loads(logs[0])["stage"] == "adaptation"

    assert main(["eval", "--config", str(cfg_path)]) == 0
    results = list((tmp_path / "out" / "results").iterdir())
    assert len(results) == 1
    scenario = json.loads((results[0] / "scenario.json").read_text())
    for key in ("mf1_no_adapt", "mf1_source_replay", "mf1_full", "mf1_full_with_ia"):
        assert 0.0 <= scenario[key] <= 1.0
    first = (results[0] / "scenario.json").read_bytes()
    assert main(["eval", "--config", str(cfg_path)]) == 0
    assert (results[0] / "scenario.json").read_bytes() == first


def test_eval_from_scratch_is_idempotent(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert main(["eval", "--config", str(cfg_path)]) == 0
    out = tmp_path / "out"
    snapshot = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    import shutil
    shutil.rmtree(out)
    assert main(["eval", "--config", str(cfg_path)]) == 0
    assert {p: p.read_bytes() for p in out.rglob("*") if p.is_file()} == snapshot


def test_ablate_branch_suite(tmp_path):
    assert main(["ablate", "--suite", "branch", "--config", str(write_cfg(tmp_path))]) == 0
    (result,) = (tmp_path / "out" / "results").iterdir()
    rows = (result / "ablation_branch.csv").read_text().splitlines()
    assert rows[0].startswith("Variant,")
    assert [r.split(",")[0] for r in rows[1:]] == ["CT w/o SR-branch", "CT w/o OC-branch", "Full CT"]


def test_multi_scenario_root(tmp_path):
    root = tmp_path / "bench"
    main(["synth", "--n", "20", "--length", "60", "--shift-offset", "0.4", "--out", str(root)])
    cfg_path = write_cfg(tmp_path, f"data.root = {root}\ndata.scenarios = source-target, target-source\n")
    assert main(["eval", "--config", str(cfg_path)]) == 0
    (result,) = (tmp_path / "out" / "results").iterdir()
    header = (result / "table.csv").read_text().splitlines()[0]
    assert header == "Algorithm,source-target,target-source,AVG"
