#!/usr/bin/env python3
"""Convert the ETHICS commonsense CSV into the nfb corpus JSONL format.

Input columns: label,input,is_short,edited. Label 1 marks a scenario judged
morally wrong; it is kept as-is. Output rows are {"id", "text", "label"}.
"""

import argparse
import csv
import json
import random
import sys


def read_rows(path, short_only=True):
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for i, rec in enumerate(csv.DictReader(f)):
            if short_only and rec.get("is_short", "1").strip().lower() not in ("1", "true"):
                continue
            if rec.get("edited", "").strip().lower() in ("1", "true"):
                continue
            text = " ".join(rec["input"].split())
            if not text:
                continue
            rows.append({"id": f"cm-{i}", "text": text, "label": int(rec["label"])})
    return rows


def balanced_sample(rows, n, seed):
    """Draw n rows, half per label (the odd one from label 0), reproducibly."""
    rng = random.Random(seed)
    by_label = {0: [r for r in rows if r["label"] == 0], 1: [r for r in rows if r["label"] == 1]}
    want = {1: n // 2, 0: n - n // 2}
    out = []
    for label, k in want.items():
        pool = by_label[label]
        if len(pool) < k:
            raise ValueError(f"only {len(pool)} rows with label {label}, need {k}")
        out.extend(rng.sample(pool, k))
    rng.shuffle(out)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv", help="cm_train.csv or cm_test.csv from the ETHICS release")
    p.add_argument("-o", "--out", default="-", help="output JSONL (default stdout)")
    p.add_argument("-n", "--sample", type=int, default=1200, help="rows to keep, 0 for all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-long", action="store_true", help="keep the long Reddit-style scenarios")
    args = p.parse_args(argv)

    rows = read_rows(args.csv, short_only=not args.include_long)
    if args.sample:
        rows = balanced_sample(rows, args.sample, args.seed)

    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
    try:
        for r in rows:
            out.write(json.dumps(r, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"wrote {len(rows)} sentences", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
