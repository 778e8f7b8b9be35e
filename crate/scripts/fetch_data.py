#!/usr/bin/env python3
"""Rebuild the bundled datasets under data/ from package-registry sources.

Iris comes from scikit-learn's bundled copy, Pima Indians Diabetes and
Ionosphere from the KEEL collection shipped in the `keel_ds` wheel, and the
MNIST subset from the IDX files shipped in the npm `mnist-data` package.

Pima stores unrecorded measurements as 0 in glucose, blood pressure, skin
thickness, insulin and BMI; those cells are written as "?" so the pipeline's
KNN imputation handles them.
"""
import gzip
import io
import os
import struct
import subprocess
import sys
import tarfile
import tempfile
import zipfile

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")
MNIST_TRAIN = 10_000
MNIST_TEST = 2_000


def write_iris(out):
    import sklearn.datasets

    path = os.path.join(os.path.dirname(sklearn.datasets.__file__), "data", "iris.csv")
    with open(path) as f:
        header = f.readline().strip().split(",")
        names = header[2:]
        rows = [line.strip().split(",") for line in f if line.strip()]
    with open(out, "w") as f:
        f.write("sepal_length,sepal_width,petal_length,petal_width,class\n")
        for r in rows:
            f.write(",".join(r[:4] + [names[int(r[4])]]) + "\n")


def keel_rows(whl, name):
    z = zipfile.ZipFile(whl)
    text = z.read(f"keel_ds/data/balanced/raw/{name}.dat").decode()
    return [
        [c.strip() for c in line.split(",")]
        for line in text.splitlines()
        if line.strip() and not line.startswith("@")
    ]


def write_pima(whl, out):
    cols = ["pregnancies", "glucose", "blood_pressure", "skin_thickness",
            "insulin", "bmi", "pedigree", "age", "class"]
    zero_is_missing = {1, 2, 3, 4, 5}
    with open(out, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in keel_rows(whl, "pima"):
            cells = ["?" if i in zero_is_missing and float(v) == 0.0 else v
                     for i, v in enumerate(r[:-1])]
            f.write(",".join(cells + [r[-1]]) + "\n")


def write_ionosphere(whl, out):
    rows = keel_rows(whl, "ionosphere")
    n = len(rows[0]) - 1
    with open(out, "w") as f:
        f.write(",".join([f"a{i + 1}" for i in range(n)] + ["class"]) + "\n")
        for r in rows:
            f.write(",".join(r) + "\n")


def idx_subset(data, count, image):
    if image:
        magic, n, h, w = struct.unpack(">IIII", data[:16])
        body = data[16:16 + count * h * w]
        return struct.pack(">IIII", magic, count, h, w) + body
    magic, n = struct.unpack(">II", data[:8])
    return struct.pack(">II", magic, count) + data[8:8 + count]


def write_mnist(tgz, outdir):
    os.makedirs(outdir, exist_ok=True)
    with tarfile.open(tgz) as t:
        def grab(name):
            return t.extractfile(f"package/data/{name}").read()

        parts = [
            ("train-images-idx3-ubyte", MNIST_TRAIN, True),
            ("train-labels-idx1-ubyte", MNIST_TRAIN, False),
            ("t10k-images-idx3-ubyte", MNIST_TEST, True),
            ("t10k-labels-idx1-ubyte", MNIST_TEST, False),
        ]
        for name, count, image in parts:
            blob = idx_subset(grab(name), count, image)
            with gzip.GzipFile(os.path.join(outdir, name + ".gz"), "wb", mtime=0) as g:
                g.write(blob)


def main():
    os.makedirs(ROOT, exist_ok=True)
    tmp = tempfile.mkdtemp()
    subprocess.check_call([sys.executable, "-m", "pip", "download", "--no-deps",
                           "-q", "keel_ds==0.2.5", "-d", tmp])
    whl = next(os.path.join(tmp, f) for f in os.listdir(tmp) if f.endswith(".whl"))
    subprocess.check_call(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp,
                          stdout=subprocess.DEVNULL)
    tgz = os.path.join(tmp, "mnist-data-1.2.6.tgz")

    write_iris(os.path.join(ROOT, "iris.csv"))
    write_pima(whl, os.path.join(ROOT, "pima.csv"))
    write_ionosphere(whl, os.path.join(ROOT, "ionosphere.csv"))
    write_mnist(tgz, os.path.join(ROOT, "mnist"))


if __name__ == "__main__":
    main()
