#!/usr/bin/env python3
"""Rebuild the Statlog DNA dataset (3186 x 180, 3 classes) in LIBSVM format.

The source is the primate splice-junction data (60 nucleotides per record,
classes EI / IE / N) as shipped in the `keel-ds` wheel:

    pip download --no-deps keel-ds
    python3 scripts/make_dna.py keel_ds-*.whl data/dna

Records containing the ambiguity codes D, R or S are dropped (N is kept and
encoded as all zeros), which leaves 3186 records with class counts
767 / 765 / 1654. Each nucleotide becomes three binary indicators
(A=100, C=010, G=001, T=000). Labels: EI=1, IE=2, N=3.

The train/validation/test split (1400 / 600 / 1186) is a seeded shuffle.
"""
import random
import sys
import zipfile
from pathlib import Path

ENCODING = {"A": (1, 0, 0), "C": (0, 1, 0), "G": (0, 0, 1), "T": (0, 0, 0), "N": (0, 0, 0)}
LABELS = {"EI": 1, "IE": 2, "N": 3}
SEED = 20210101


def read_records(src: Path):
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as z:
            text = z.read("keel_ds/data/balanced/raw/splice.dat").decode()
    else:
        text = src.read_text()
    for line in text.splitlines():
        if not line.strip() or line.startswith("@"):
            continue
        fields = [f.strip() for f in line.split(",")]
        yield fields[:-1], fields[-1]


def to_libsvm(seq, label):
    feats = []
    for pos, nt in enumerate(seq):
        for bit, v in enumerate(ENCODING[nt]):
            if v:
                feats.append(f"{pos * 3 + bit + 1}:1")
    return " ".join([str(LABELS[label])] + feats)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    rows = [to_libsvm(s, y) for s, y in read_records(src) if all(c in ENCODING for c in s)]
    assert len(rows) == 3186, len(rows)
    random.Random(SEED).shuffle(rows)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("dna.tr", rows[:1400]), ("dna.val", rows[1400:2000]), ("dna.t", rows[2000:])):
        (out / name).write_text("\n".join(part) + "\n")


if __name__ == "__main__":
    main()
