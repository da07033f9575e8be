#!/usr/bin/env python3
"""Rebuild the LibSVM-format `mushrooms` and `a5a` files shipped in data/.

Inputs are the raw UCI files:
  * mushroom CSV (header + 8124 rows, class in column 0), e.g. the copy
    bundled as tests/mushroom.csv in the `wittgenstein` wheel on PyPI;
  * adult.data + adult.names, e.g. the copies bundled in the
    `responsibly` wheel on PyPI (responsibly/dataset/adult/).

mushrooms: every nominal attribute except stalk-root (the one with missing
values) is one-hot expanded over its observed values, giving 112 binary
features. Rows keep the UCI order; edible -> 1, poisonous -> 2.

a5a: the first 6414 rows of adult.data encoded into 123 binary features.
Continuous attributes are binned (age, fnlwgt, education-num, hours-per-week
into quintiles over the full training file; capital-gain and capital-loss
into zero / nonzero), nominal attributes are one-hot over the values declared
in adult.names. Missing values ('?') set no feature. Labels: >50K -> +1,
<=50K -> -1. This reproduces the shape (N = 6414, d = 123) and the encoding
scheme of the LibSVM file, not its exact row selection.

usage: make_datasets.py MUSHROOM_CSV ADULT_DATA ADULT_NAMES OUT_DIR
"""

import csv
import os
import sys


def write_libsvm(path, rows):
    with open(path, "w") as out:
        for label, idx in rows:
            feats = " ".join(f"{j}:1" for j in sorted(idx))
            out.write(f"{label} {feats}\n")


def mushrooms(src, out_dir):
    with open(src) as fh:
        table = list(csv.reader(fh))[1:]
    stalk_root = 11
    columns = [j for j in range(1, 23) if j != stalk_root]
    offsets = {}
    next_index = 1
    for j in columns:
        for v in sorted({r[j] for r in table}):
            offsets[(j, v)] = next_index
            next_index += 1
    assert next_index - 1 == 112, next_index - 1
    rows = []
    for r in table:
        label = 1 if r[0] == "e" else 2
        rows.append((label, [offsets[(j, r[j])] for j in columns]))
    write_libsvm(os.path.join(out_dir, "mushrooms"), rows)


def declared_values(names_path):
    values = {}
    with open(names_path) as fh:
        for line in fh:
            if ":" not in line or line.startswith("|"):
                continue
            key, rest = line.split(":", 1)
            rest = rest.strip().rstrip(".")
            if rest and rest != "continuous":
                values[key.strip()] = [v.strip() for v in rest.split(",")]
    return values


def quintile_edges(values):
    s = sorted(values)
    return [s[(len(s) * q) // 5] for q in range(1, 5)]


def a5a(data_path, names_path, out_dir, count=6414):
    with open(data_path) as fh:
        table = [[c.strip() for c in line.split(",")] for line in fh if line.strip()]
    names = declared_values(names_path)
    layout = [
        ("age", "q"), ("workclass", "c"), ("fnlwgt", "q"), ("education", "c"),
        ("education-num", "q"), ("marital-status", "c"), ("occupation", "c"),
        ("relationship", "c"), ("race", "c"), ("sex", "c"),
        ("capital-gain", "z"), ("capital-loss", "z"), ("hours-per-week", "q"),
        ("native-country", "c"),
    ]
    encoders = []
    next_index = 1
    for col, (name, kind) in enumerate(layout):
        if kind == "c":
            cats = names[name]
            encoders.append((kind, next_index, {v: i for i, v in enumerate(cats)}))
            next_index += len(cats)
        elif kind == "q":
            edges = quintile_edges([float(r[col]) for r in table])
            encoders.append((kind, next_index, edges))
            next_index += 5
        else:
            encoders.append((kind, next_index, None))
            next_index += 2
    assert next_index - 1 == 123, next_index - 1
    rows = []
    for r in table[:count]:
        idx = []
        for col, (kind, base, enc) in enumerate(encoders):
            v = r[col]
            if v == "?":
                continue
            if kind == "c":
                idx.append(base + enc[v])
            elif kind == "q":
                idx.append(base + sum(1 for e in enc if float(v) >= e))
            else:
                idx.append(base + (0 if float(v) == 0.0 else 1))
        label = 1 if r[14].startswith(">50K") else -1
        rows.append((label, idx))
    write_libsvm(os.path.join(out_dir, "a5a"), rows)


if __name__ == "__main__":
    if len(sys.argv) != 5:
        sys.exit(__doc__)
    mushrooms(sys.argv[1], sys.argv[4])
    a5a(sys.argv[2], sys.argv[3], sys.argv[4])
