"""Run one ablation axis on the synthetic gate configuration and write a CSV.

Each variant is trained and evaluated once per seed; per-variant means follow the seed rows.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from xview.config import load_config
from xview.train import ablate, ablation_csv

sys.path.insert(0, str(Path(__file__).resolve().parent))
from run_gate import GATE  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--axis", choices=("modules", "fusion", "k_ratio", "M", "input"), default="modules")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(None, GATE + ["train.log_every=0"] + args.set)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.time()

    def progress(name, seed, report):
        logging.info("%-24s seed=%d mean_auprc=%.4f avg_tiou=%.4f  (%.0fs)",
                     name, seed, report.mean_auprc("error"), report.avg_tiou or 0.0, time.time() - t0)

    text = ablation_csv(ablate(cfg, args.axis, seeds, progress))
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")


if __name__ == "__main__":
    main()
