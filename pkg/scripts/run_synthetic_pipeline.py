"""Run the full synthetic pipeline through the CLI and print the report.

    python scripts/run_synthetic_pipeline.py --out runs/demo --seed 0
"""

import argparse
import json
import sys
import time
from pathlib import Path

from poseloc.cli import main


def steps(scene, out, seed, variant, n_database, n_query):
    return [
        ["synth", "--out", scene, "--seed", seed, "--n-database", n_database, "--n-query", n_query],
        ["mine", "--scene", scene, "--out", out, "--seed", seed],
        ["train", "--scene", scene, "--out", out, "--seed", seed, "--phase", "pretrain", "--preset", "desk"],
        ["train", "--scene", scene, "--out", out, "--seed", seed, "--phase", "finetune", "--preset", "desk",
         "--variant", variant, "--checkpoint", out / "pretrain.rfck"],
        ["index", "--scene", scene, "--out", out, "--checkpoint", out / "finetune.rfck"],
        ["eval", "--scene", scene, "--out", out, "--checkpoint", out / "finetune.rfck", "--index", out / "index.rfix"],
    ]


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="PL+PA+H")
    ap.add_argument("--n-database", type=int, default=500)
    ap.add_argument("--n-query", type=int, default=100)
    return ap.parse_args()


if __name__ == "__main__":
    args = parse_args()
    root = Path(args.out)
    scene, out = root / "scene", root / "run"
    total = time.perf_counter()
    for argv in steps(scene, out, args.seed, args.variant, args.n_database, args.n_query):
        start = time.perf_counter()
        code = main([str(a) for a in argv])
        print(f"[{argv[0]}] exit {code} in {time.perf_counter() - start:.1f} s")
        if code:
            sys.exit(code)
    print((out / "report.txt").read_text())
    row = json.loads((out / "report.json").read_text())["scenes"]["synthetic"]
    print(f"pipeline beats retrieval: translation {row['pipeline'][0] < row['retrieval'][0]}, "
          f"rotation {row['pipeline'][1] < row['retrieval'][1]}")
    print(f"total {time.perf_counter() - total:.1f} s")
