"""Write the 5000-image MNIST sample shipped with mlxtend as an IDX file pair.

Offline stand-in for the full MNIST download:

    python scripts/mnist5k_to_idx.py data/mnist5k
"""

import argparse
import gzip
import importlib.util
import os
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from unlearn_surgery.data import LabeledDataset, write_idx  # noqa: E402


def mlxtend_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise SystemExit("mlxtend is not installed (pip install mlxtend)")
    return Path(os.path.dirname(spec.origin)) / "data" / "data" / "mnist_5k.csv.gz"


def convert(out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with gzip.open(mlxtend_csv(), "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    ds = LabeledDataset((raw[:, :-1] / 255.0).astype(np.float32), raw[:, -1], "mnist5k")
    images = out_dir / "mnist5k-images-idx3-ubyte"
    labels = out_dir / "mnist5k-labels-idx1-ubyte"
    write_idx(ds, images, labels)
    return images, labels


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="data/mnist5k")
    for p in convert(ap.parse_args().out_dir):
        print(p)
