"""Convert array files into the dataset container layout.

Accepts a ``.pt`` file holding a dict with ``samples`` and ``labels`` (the
layout used by common time-series DA benchmark releases), or a pair of
``.npy`` files. Series are cast to float32 and stored as [N, d, L].

    python scripts/convert_arrays.py train.pt out/0
    python scripts/convert_arrays.py x.npy out/0 --labels y.npy --k 3
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from ctsfda.ingest import DomainDataset, save_dataset


def load_arrays(path: Path, labels_path=None):
    if path.suffix == ".pt":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        x, y = blob["samples"], blob.get("labels")
    else:
        x = np.load(path)
        y = np.load(labels_path) if labels_path else None
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.dim() == 2:
        x = x.unsqueeze(1)
    y = None if y is None else torch.as_tensor(np.asarray(y)).long()
    return x, y


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("input", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--labels", type=Path, help="label .npy when the input is .npy")
    ap.add_argument("--k", type=int, help="class count (default: max label + 1)")
    ap.add_argument("--channels-last", action="store_true", help="input is [N, L, d]")
    args = ap.parse_args(argv)

    x, y = load_arrays(args.input, args.labels)
    if args.channels_last:
        x = x.transpose(1, 2).contiguous()
    k = args.k or (int(y.max()) + 1 if y is not None else 1)
    ds = DomainDataset(x, y, args.out.name, k)
    save_dataset(ds, args.out)
    print(f"{args.input} -> {args.out}: N={len(ds)} d={ds.d} L={ds.length} K={k}")


if __name__ == "__main__":
    main()
