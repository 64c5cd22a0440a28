#!/usr/bin/env python3
"""Build IDX digit files from the `mnist` npm package (10 000 MNIST digits).

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]

The package ships 28x28 digits as JSON float arrays in [0, 1]; they are
quantized back to u8 and written as standard big-endian IDX files:
  train-images-idx3-ubyte (magic 0x00000803)
  train-labels-idx1-ubyte (magic 0x00000801)
"""
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "data", "mnist")
os.makedirs(out_dir, exist_ok=True)

with tempfile.TemporaryDirectory() as tmp:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
    with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(tmp)
    samples = []
    for digit in range(10):
        with open(os.path.join(tmp, "package", "src", "digits", f"{digit}.json")) as f:
            data = json.load(f)["data"]
        for i in range(0, len(data), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[i : i + 784])
            samples.append((pixels, digit))

random.Random(0).shuffle(samples)

with open(os.path.join(out_dir, "train-images-idx3-ubyte"), "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    for pixels, _ in samples:
        f.write(pixels)
with open(os.path.join(out_dir, "train-labels-idx1-ubyte"), "wb") as f:
    f.write(struct.pack(">II", 0x00000801, len(samples)))
    f.write(bytes(label for _, label in samples))
print(f"wrote {len(samples)} digits to {out_dir}")
