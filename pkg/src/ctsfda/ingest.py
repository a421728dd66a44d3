"""Dataset container I/O and the synthetic domain-shift generator.

Container layout (one directory per domain)::

    manifest.json   {"n": N, "d": d, "l": L, "k": K, "dtype": "f32le", "has_labels": bool,
                     "domain_id": str (optional)}
    series.bin      little-endian float32, row-major [N, d, L]
    labels.bin      little-endian int64 [N]   (only when has_labels)
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .datamodel import check_labels, check_series

SERIES_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<i8")


class DatasetFormatError(ValueError):
    pass


@dataclass
class DomainDataset:
    series: Tensor
    labels: Optional[Tensor]
    domain_id: str
    k: int
    # "source", "target" or None; adaptation refuses anything tagged "source".
    role: Optional[str] = None

    def __post_init__(self):
        check_series(self.series, "series")
        if self.k < 1:
            raise ValueError(f"class count must be >= 1, got {self.k}")
        if self.labels is not None:
            check_labels(self.labels, self.k)
            if len(self.labels) != len(self.series):
                raise DatasetFormatError(f"{len(self.labels)} labels for {len(self.series)} series")

    def __len__(self):
        return self.series.shape[0]

    @property
    def d(self) -> int:
        return self.series.shape[1]

    @property
    def length(self) -> int:
        return self.series.shape[2]

    def subset(self, idx) -> "DomainDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, series=self.series[idx], labels=labels)

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)


@dataclass(frozen=True)
class ShiftConfig:
    """Transform applied to source signals to produce the target domain."""

    amplitude_scale: float = 1.0
    time_warp_strength: float = 0.0
    noise_sigma: float = 0.0
    channel_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.amplitude_scale > 0:
            raise ValueError("amplitude_scale must be > 0")
        if not 0 <= self.time_warp_strength < 1:
            # warp maps stay monotone only below 1
            raise ValueError("time_warp_strength must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.amplitude_scale == 1.0 and self.time_warp_strength == 0.0
                and self.noise_sigma == 0.0 and self.channel_offset == 0.0)


def save_dataset(ds: DomainDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, d, l = ds.series.shape
    manifest = {"n": n, "d": d, "l": l, "k": ds.k, "dtype": "f32le",
                "has_labels": ds.labels is not None, "domain_id": ds.domain_id}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.series.detach().cpu().numpy().astype(SERIES_DTYPE).tofile(path / "series.bin")
    labels_file = path / "labels.bin"
    if ds.labels is not None:
        ds.labels.cpu().numpy().astype(LABEL_DTYPE).tofile(labels_file)
    elif labels_file.exists():
        labels_file.unlink()
    return path


def load_dataset(path, role: Optional[str] = None) -> DomainDataset:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.is_file():
        raise DatasetFormatError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_file.read_text())
    missing = {"n", "d", "l", "k", "has_labels"} - manifest.keys()
    if missing:
        raise DatasetFormatError(f"manifest missing fields: {sorted(missing)}")
    if manifest.get("dtype", "f32le") != "f32le":
        raise DatasetFormatError(f"unsupported dtype {manifest['dtype']!r}; only f32le is defined")
    n, d, l, k = (int(manifest[key]) for key in ("n", "d", "l", "k"))
    if n < 1:
        raise DatasetFormatError("manifest declares an empty dataset")

    series = _read_raw(path / "series.bin", SERIES_DTYPE, n * d * l).reshape(n, d, l)
    labels = None
    if manifest["has_labels"]:
        labels = _read_raw(path / "labels.bin", LABEL_DTYPE, n)
        if labels.min() < 0 or labels.max() >= k:
            raise DatasetFormatError(f"label values must lie in [0, {k}), found max {labels.max()}")
        labels = torch.from_numpy(labels.astype(np.int64))
    return DomainDataset(torch.from_numpy(series.astype(np.float32)), labels,
                         manifest.get("domain_id", path.name), k, role)


def _read_raw(file: Path, dtype: np.dtype, count: int) -> np.ndarray:
    if not file.is_file():
        raise DatasetFormatError(f"missing {file.name} in {file.parent}")
    size = os.path.getsize(file)
    if size != count * dtype.itemsize:
        raise DatasetFormatError(f"{file.name}: expected {count * dtype.itemsize} bytes, found {size}")
    return np.fromfile(file, dtype=dtype, count=count)


def train_test_split(ds: DomainDataset, test_fraction: float, seed: int = 0):
    """Deterministic split; equal-size datasets with the same seed get the same index sets."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(ds)
    n_test = min(max(1, int(round(n * test_fraction))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# synthetic domain pairs

SOURCE_NOISE = 0.05


def _template(kind: int, cycles: np.ndarray, phase: np.ndarray, t: np.ndarray) -> np.ndarray:
    # cycles, phase: [n, 1]; t: [L] in [0, 1)
    if kind == 0:
        return np.sin(2 * np.pi * (cycles * t + phase))
    if kind == 1:
        frac = np.mod(cycles * t + phase, 1.0)
        return 2.0 * frac - 1.0
    # linear chirp, instantaneous frequency rising from `cycles` to 2 * `cycles`
    return np.sin(2 * np.pi * (cycles * (t + 0.5 * t * t) + phase))


def _source_signals(labels: np.ndarray, n_classes: int, d: int, L: int, rng) -> np.ndarray:
    n = len(labels)
    t = np.arange(L) / L
    x = np.empty((n, d, L))
    cycles = 3.0 + 2.0 * labels[:, None] * rng.uniform(0.9, 1.1, size=(n, 1))
    amp = rng.uniform(0.8, 1.2, size=(n, 1))
    for ch in range(d):
        phase = rng.uniform(0, 1, size=(n, 1))
        for c in range(n_classes):
            rows = labels == c
            x[rows, ch] = _template(c % 3, cycles[rows], phase[rows], t)
        x[:, ch] *= amp / (1.0 + 0.2 * ch)
    return x + SOURCE_NOISE * rng.standard_normal(x.shape)


def _smooth_warp(x: np.ndarray, strength: float, rng) -> np.ndarray:
    # tau(t) = t + sum_m a_m sin(m pi t) / (m pi): fixes endpoints, tau' >= 1 - sum|a_m| > 0
    n, d, L = x.shape
    grid = np.linspace(0.0, 1.0, L)
    out = np.empty_like(x)
    coef = rng.uniform(-strength, strength, size=(n, 2)) / 2.0
    for i in range(n):
        tau = grid.copy()
        for m in (1, 2):
            tau += coef[i, m - 1] * np.sin(m * np.pi * grid) / (m * np.pi)
        for ch in range(d):
            out[i, ch] = np.interp(tau, grid, x[i, ch])
    return out


def apply_shift(x: np.ndarray, shift: ShiftConfig, rng) -> np.ndarray:
    if shift.is_identity:
        return x.copy()
    y = _smooth_warp(x, shift.time_warp_strength, rng) if shift.time_warp_strength > 0 else x.copy()
    y = shift.amplitude_scale * y + shift.channel_offset
    if shift.noise_sigma > 0:
        y = y + shift.noise_sigma * rng.standard_normal(y.shape)
    return y


def generate_synthetic_pair(base_classes: int, n_per_class: int, d: int, L: int,
                            shift: ShiftConfig = ShiftConfig()):
    """Return ``(source, target)`` datasets sharing labels and underlying draws.

    Class ``c`` is a sinusoid, sawtooth or chirp (cycling with ``c``) whose base
    frequency grows with ``c``. The target is the source passed through ``shift``,
    so the label histograms agree exactly and an identity shift reproduces the
    source bit for bit.
    """
    if base_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if L < 16 or d < 1:
        raise ValueError("need L >= 16 and d >= 1")
    source_seq, target_seq = np.random.SeedSequence(shift.seed).spawn(2)
    labels = np.repeat(np.arange(base_classes), n_per_class)
    xs = _source_signals(labels, base_classes, d, L, np.random.default_rng(source_seq))
    xt = apply_shift(xs, shift, np.random.default_rng(target_seq))
    y = torch.from_numpy(labels.astype(np.int64))
    source = DomainDataset(torch.from_numpy(xs.astype(np.float32)), y, "synthetic-src", base_classes, "source")
    target = DomainDataset(torch.from_numpy(xt.astype(np.float32)), y.clone(), "synthetic-tgt", base_classes, "target")
    return source, target
