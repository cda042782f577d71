#!/usr/bin/env python3
"""Build IDX-format MNIST files from the digits bundled in the npm `mnist` package.

The official MNIST mirrors are not always reachable; the npm package ships
10000 real MNIST digits (pixel values stored as round(v / 255, 3)), which is
enough for the desk-scale presets. Bytes are recovered exactly with
round(v * 255). Examples are shuffled with a fixed seed so that any prefix
split contains every class.

Usage: scripts/fetch_mnist.py [--out data/mnist] [--tarball mnist-1.1.0.tgz]
"""
import argparse
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"


def fetch_tarball(workdir: pathlib.Path) -> pathlib.Path:
    out = subprocess.run(["npm", "pack", PACKAGE], cwd=workdir, check=True,
                         capture_output=True, text=True)
    return workdir / out.stdout.strip().splitlines()[-1]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist"))
    ap.add_argument("--tarball", default=None)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        tgz = pathlib.Path(args.tarball) if args.tarball else fetch_tarball(tmp)
        with tarfile.open(tgz) as tf:
            tf.extractall(tmp / "pkg")
        examples = []
        for digit in range(10):
            raw = json.loads((tmp / "pkg" / "package" / "src" / "digits" / f"{digit}.json").read_text())["data"]
            assert len(raw) % 784 == 0
            for i in range(len(raw) // 784):
                pix = bytes(max(0, min(255, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
                examples.append((pix, digit))

    random.Random(20240601).shuffle(examples)
    n = len(examples)
    with open(out / "npm-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pix, _ in examples:
            f.write(pix)
    with open(out / "npm-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in examples))
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main()
