"""Train and evaluate the synthetic gate configuration; prints the report."""
import argparse
import logging
import time

from xview.config import load_config
from xview.train import cosine_probe, run_variant

GATE = [
    "data.d=32", "det.d_model=32", "train.n_train=40", "train.n_eval=20", "data.steps=6",
    "data.error_rate=0.3", "data.redundancy=0.5", "train.steps=500",
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(None, GATE + args.set)
    t0 = time.time()
    report, state, pairs = run_variant(cfg, args.seed)
    print(report.to_text())
    cos = cosine_probe(state.model, pairs)
    pre = sum(a for a, _ in cos) / len(cos)
    post = sum(b for _, b in cos) / len(cos)
    print(f"cos pre={pre:.4f} post={post:.4f}")
    print(f"elapsed {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
