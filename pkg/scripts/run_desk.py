"""Run the whole desk pipeline and print the mode comparison.

    python3 scripts/run_desk.py --out runs/desk [--config configs/desk.json] [--total 8000 --truth-seed 0]
"""

import argparse
import dataclasses
import logging
import time

import torch

from odlab import metrics
from odlab.cli import load_config, run_pipeline

p = argparse.ArgumentParser()
p.add_argument("--config")
p.add_argument("--out", default="runs/desk")
p.add_argument("--total", type=int, help="override the truth total")
p.add_argument("--truth-seed", type=int, help="override the truth seed")
p.add_argument("--epochs", type=int, help="override the learner epoch cap")
p.add_argument("--svg", action="store_true")
args = p.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
torch.set_num_threads(1)
cfg = load_config(args.config)
truth = dataclasses.replace(cfg.truth, **{k: v for k, v in (("total", args.total), ("seed", args.truth_seed)) if v is not None})
learner = cfg.learner if args.epochs is None else dataclasses.replace(cfg.learner, max_epochs=args.epochs)
cfg = dataclasses.replace(cfg, truth=truth, learner=learner)

t0 = time.time()
res = run_pipeline(cfg, args.out, plots=args.svg)
print(metrics.format_table(res["summary"]))
print(open(f"{args.out}/report/kl.csv").read())
print(f"done in {time.time() - t0:.0f}s; outputs in {args.out}")
