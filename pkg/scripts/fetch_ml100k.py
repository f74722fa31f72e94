#!/usr/bin/env python3
"""Fetch MovieLens-100K through the Python package index.

The GroupLens site is not always reachable from build machines, but the
``recbole`` wheel on PyPI bundles the full ML-100K ratings and user
profiles. This pulls that wheel, and writes

    <out>/ratings.tsv   user, item, rating, timestamp (tab-separated, no header)
    <out>/users.tsv     user, gender

Usage: python scripts/fetch_ml100k.py [--out DIR]   (default $FDA_DATA_DIR/ml-100k)
"""

import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL = "recbole==1.2.1"
PREFIX = "recbole/dataset_example/ml-100k/"


def fetch(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-q", "-d", tmp, WHEEL],
            check=True,
        )
        (wheel,) = glob.glob(os.path.join(tmp, "*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            inter = zf.read(PREFIX + "ml-100k.inter").decode("utf-8").splitlines()[1:]
            users = zf.read(PREFIX + "ml-100k.user").decode("utf-8").splitlines()[1:]
    with open(out / "ratings.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for line in inter:
            u, i, r, t = line.split("\t")
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(out / "users.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for line in users:
            parts = line.split("\t")
            fh.write(f"{parts[0]}\t{parts[2]}\n")
    return out


def main():
    default = Path(os.environ.get("FDA_DATA_DIR", "data")) / "ml-100k"
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=default)
    args = ap.parse_args()
    out = fetch(args.out)
    print(f"wrote {out}/ratings.tsv and {out}/users.tsv")


if __name__ == "__main__":
    main()
