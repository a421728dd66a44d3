"""Named-parameter bookkeeping: content fingerprints, the freezing contract, checkpoints.

Every module's state (parameters and buffers) is treated as a flat collection of
named arrays. A module is *frozen* once :func:`freeze` has recorded its
fingerprint; :func:`assert_frozen` later checks that nothing changed since.

Checkpoint layout (one directory per module)::

    params.json        {"arrays": [{"name", "shape", "file", "frozen", "dtype"}], "fingerprint", "meta"}
    <name>.f32         raw little-endian float32 per array
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

_FROZEN_ATTR = "_frozen_fingerprint"


class FrozenContractError(RuntimeError):
    """A module flagged frozen was modified."""


class CheckpointError(RuntimeError):
    pass


def named_arrays(module: nn.Module) -> dict[str, torch.Tensor]:
    return dict(sorted(module.state_dict(keep_vars=False).items()))


def fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in named_arrays(module).items():
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def frozen_flags(module: nn.Module) -> dict[str, bool]:
    """Per-array frozen flag. Buffers follow the module's frozen state."""
    whole = is_frozen(module)
    params = dict(module.named_parameters())
    return {name: whole or (name in params and not params[name].requires_grad)
            for name in named_arrays(module)}


def freeze(module: nn.Module) -> nn.Module:
    """Freeze in place: no gradients, eval mode, fingerprint recorded. Returns ``module``."""
    module.requires_grad_(False)
    module.eval()
    setattr(module, _FROZEN_ATTR, fingerprint(module))
    return module


def is_frozen(module: nn.Module) -> bool:
    return getattr(module, _FROZEN_ATTR, None) is not None


def assert_frozen(module: nn.Module) -> bool:
    """True iff ``module`` is frozen and bit-identical to its state at freeze time."""
    recorded = getattr(module, _FROZEN_ATTR, None)
    return recorded is not None and recorded == fingerprint(module)


def require_frozen(module: nn.Module, what: str):
    if not is_frozen(module):
        raise FrozenContractError(f"{what} must be frozen before this stage")
    if not assert_frozen(module):
        raise FrozenContractError(f"{what} changed after it was frozen")
    if module.training:
        raise FrozenContractError(f"{what} is frozen but in training mode")


def save_checkpoint(module: nn.Module, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    flags = frozen_flags(module)
    entries = []
    for i, (name, t) in enumerate(named_arrays(module).items()):
        file = f"{i:03d}_{name}.f32"
        t.detach().cpu().numpy().astype("<f4").tofile(path / file)
        entries.append({"name": name, "shape": list(t.shape), "file": file,
                        "frozen": flags[name], "dtype": str(t.dtype).removeprefix("torch.")})
    manifest = {"arrays": entries, "fingerprint": fingerprint(module),
                "frozen": is_frozen(module), "meta": meta or {}}
    (path / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    file = Path(path) / "params.json"
    if not file.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return json.loads(file.read_text())


def load_checkpoint(module: nn.Module, path) -> nn.Module:
    """Load arrays into ``module`` (architecture must match) and restore frozen state."""
    path = Path(path)
    manifest = read_manifest(path)
    current = named_arrays(module)
    names = [e["name"] for e in manifest["arrays"]]
    if sorted(names) != list(current):
        raise CheckpointError(f"checkpoint arrays do not match module: {sorted(set(names) ^ set(current))}")
    state = {}
    for e in manifest["arrays"]:
        ref = current[e["name"]]
        if list(ref.shape) != e["shape"]:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} != module {list(ref.shape)}")
        raw = np.fromfile(path / e["file"], dtype="<f4")
        if raw.size != ref.numel():
            raise CheckpointError(f"{e['file']}: expected {ref.numel()} values, found {raw.size}")
        state[e["name"]] = torch.from_numpy(raw.reshape(e["shape"])).to(ref.dtype)
    module.load_state_dict(state)
    if ref_dtype_is_f32(current) and fingerprint(module) != manifest["fingerprint"]:
        raise CheckpointError(f"fingerprint mismatch after loading {path}")
    params = dict(module.named_parameters())
    for e in manifest["arrays"]:
        if e["name"] in params:
            params[e["name"]].requires_grad_(not e["frozen"])
    if manifest.get("frozen"):
        freeze(module)
    return module


def ref_dtype_is_f32(arrays: dict[str, torch.Tensor]) -> bool:
    # float64 modules cannot round-trip through f32 files bit-exactly
    return all(t.dtype != torch.float64 for t in arrays.values())
