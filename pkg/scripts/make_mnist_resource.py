"""Rebuild the bundled MNIST sample from mlxtend's ``mnist_5k.csv.gz``.

Usage: python scripts/make_mnist_resource.py path/to/mnist_5k.csv.gz
"""

import gzip
import io
import struct
import sys
from pathlib import Path

import numpy as np

out_dir = Path(__file__).resolve().parents[1] / "src" / "fedcpsl" / "resources"
table = np.loadtxt(sys.argv[1], delimiter=",", dtype=np.int64)
images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
labels = table[:, -1].astype(np.uint8)

buf = io.BytesIO()
buf.write(struct.pack(">IIII", 0x803, *images.shape))
buf.write(images.tobytes())
(out_dir / "mnist5k-train-images-idx3-ubyte.gz").write_bytes(gzip.compress(buf.getvalue(), mtime=0))

buf = io.BytesIO()
buf.write(struct.pack(">II", 0x801, labels.shape[0]))
buf.write(labels.tobytes())
(out_dir / "mnist5k-train-labels-idx1-ubyte.gz").write_bytes(gzip.compress(buf.getvalue(), mtime=0))
print(f"wrote {images.shape[0]} images to {out_dir}")
