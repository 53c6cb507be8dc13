"""Desk-scale EMNIST comparison: 10% subset, LeNet-5, 20 clients, 30 rounds, 3 seeds.

Needs the EMNIST gzip files (emnist-balanced-train-*-idx*-ubyte.gz) in the
directory given by --data-dir or $FEDKF_DATA_DIR. On one CPU core expect
several hours for the FedKF runs; a GPU or multicore machine is much faster.

Run:  python demos/04_desk_scale_emnist.py --data-dir ~/data/emnist --out runs/desk
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from fedkf.config import load_config
from fedkf.errors import DataUnavailableError
from fedkf.experiment import cmd_report, cmd_run

parser = argparse.ArgumentParser()
parser.add_argument("--data-dir")
parser.add_argument("--out", default="runs/desk")
parser.add_argument("--alpha", choices=("0p1", "0p01"), default="0p1")
args = parser.parse_args()

base = load_config(f"preset:emnist_desk_alpha{args.alpha}")
if args.data_dir:
    base = base.replace(dataset=dataclasses.replace(base.dataset, data_dir=args.data_dir))

runs = []
for name, use_t1 in (("fedkf", True), ("fedavg", False), ("fedavg", True)):
    cfg = base.with_algorithm(name, use_t1=use_t1)
    cfg = cfg.replace(output_dir=str(Path(args.out) / cfg.algorithm.label), checkpoint_every=5)
    try:
        runs.append(cmd_run(cfg, resume=True))
    except DataUnavailableError as err:
        sys.exit(f"EMNIST not found: {err}")

print(cmd_report(runs, Path(args.out) / "report"), end="")
