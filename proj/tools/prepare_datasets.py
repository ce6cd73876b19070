#!/usr/bin/env python3
"""Materialize the public toy datasets as plain CSV files under data/.

Sources are pip wheels that bundle the original files, so the script only
needs the package mirror:

  * Pima Indians diabetes (complete cases, MASS::Pima.tr + Pima.te) from `rdatasets`
  * UCI German credit (german.data) from `responsibly`
  * UCI optical digits (8x8) from scikit-learn

Usage: python3 tools/prepare_datasets.py [output-dir]
"""

import csv
import gzip
import lzma
import pathlib
import pickle
import subprocess
import sys
import tempfile
import zipfile

GERMAN_COLUMNS = [
    ("status", "cat"), ("duration", "num"), ("credit_history", "cat"),
    ("purpose", "cat"), ("amount", "num"), ("savings", "cat"),
    ("employment", "cat"), ("installment_rate", "num"),
    ("personal_status", "cat"), ("other_debtors", "cat"),
    ("residence_since", "num"), ("property", "cat"), ("age", "num"),
    ("other_installments", "cat"), ("housing", "cat"),
    ("existing_credits", "num"), ("job", "cat"), ("people_liable", "num"),
    ("telephone", "cat"), ("foreign_worker", "cat"),
]


def download(package, dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", dest, package],
        check=True)
    return next(pathlib.Path(dest).glob(package.replace("-", "_") + "*.whl"))


def write_pima(out, wheel):
    zf = zipfile.ZipFile(wheel)
    rows = []
    for part in ("Pima.tr", "Pima.te"):
        df = pickle.loads(lzma.decompress(zf.read(f"rdatasets/_data/MASS/{part}.pkl.compress")))
        for rec in df.drop(columns=["rownames"]).itertuples(index=False):
            rows.append(list(rec))
    with open(out / "pima.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "npreg", "glu", "bp", "skin", "bmi", "ped", "age", "diabetes"])
        for i, r in enumerate(rows):
            w.writerow([f"pima{i:04d}"] + r)


def write_german(out, wheel):
    text = zipfile.ZipFile(wheel).read("responsibly/dataset/german/german.data").decode()
    with open(out / "german_credit.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [c for c, _ in GERMAN_COLUMNS] + ["risk"])
        for i, line in enumerate(text.split("\n")):
            if not line.strip():
                continue
            fields = line.split()
            risk = "good" if fields[-1] == "1" else "bad"
            w.writerow([f"gc{i:04d}"] + fields[:-1] + [risk])


def write_digits(out):
    import sklearn
    path = pathlib.Path(sklearn.__file__).parent / "datasets" / "data" / "digits.csv.gz"
    with gzip.open(path, "rt") as src, open(out / "digits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"px{j}" for j in range(64)] + ["digit"])
        for i, row in enumerate(csv.reader(src)):
            pixels = [str(int(float(v))) for v in row[:64]]
            w.writerow([f"dg{i:04d}"] + pixels + [str(int(float(row[64])))])


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        write_pima(out, download("rdatasets", tmp))
        write_german(out, download("responsibly", tmp))
    write_digits(out)
    print("wrote", sorted(p.name for p in out.glob("*.csv")))


if __name__ == "__main__":
    main()
