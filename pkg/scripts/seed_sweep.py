"""Repeat the reference run over several seeds and print Overall Mean per variant.

    python scripts/seed_sweep.py OUT_DIR 0 1 2
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from instyle.config import resolve
from instyle.pipeline import reference_run

HERE = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("seeds", type=int, nargs="+")
    ap.add_argument("--config", type=Path, default=HERE / "experiments/reference.cfg")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    cfg = resolve(args.config, environ={})
    rows = {}
    for seed in args.seeds:
        report = reference_run(replace(cfg, seed=seed), args.out / f"seed{seed}")["report"]
        rows[seed] = {r.method: r for r in report.rows}
        print(f"seed {seed}\n{report.table()}", flush=True)
    methods = list(next(iter(rows.values())))
    print("method      " + "".join(f"  seed{s:<3d}" for s in rows) + "   mean")
    for m in methods:
        vals = [rows[s][m].overall for s in rows]
        print(f"{m:<12}" + "".join(f"  {v:7.3f}" for v in vals) + f"  {sum(vals) / len(vals):6.3f}")


if __name__ == "__main__":
    main()
