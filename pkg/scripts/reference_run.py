"""Run the reference experiment and record artifact hashes and timings.

    python scripts/reference_run.py OUT_DIR [--record experiments/reference.sha256]
"""
import argparse
import json
import logging
from pathlib import Path

from instyle.config import resolve
from instyle.pipeline import artifact_hashes, reference_run

HERE = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--config", type=Path, default=HERE / "experiments/reference.cfg")
    ap.add_argument("--record", type=Path, help="write sha256 lines for every artifact here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = reference_run(resolve(args.config, environ={}), args.out)
    print(result["report"].table())
    if args.record:
        hashes = artifact_hashes(args.out)
        args.record.write_text("".join(f"{h}  {name}\n" for name, h in hashes.items()))
    # wall times vary between runs, so they are written after hashing
    (args.out / "timings.json").write_text(json.dumps(result["times"], indent=1) + "\n")


if __name__ == "__main__":
    main()
