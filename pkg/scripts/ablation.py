"""Run every ablation setting on a synthetic set and print a comparison table.

    python scripts/ablation.py --samples 16 --steps 100 --out runs/ablation

Desk-scale rankings are noise-dominated; the published full-scale column is
printed for orientation only.
"""

import argparse
import logging
import time

import torch

from rsonet.data import SynthSpec, synth_generate
from rsonet.metrics import format_table
from rsonet.model import ABLATIONS
from rsonet.persistence import RunConfig
from rsonet.reference import FULL_SCALE_ABLATION
from rsonet.training import run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--samples", type=int, default=16)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tags", nargs="*", default=list(ABLATIONS), choices=ABLATIONS)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    samples = synth_generate(SynthSpec(count=args.samples, seed=args.seed))
    cfg = RunConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed, eval_every=max(1, args.steps), log_every=max(1, args.steps))
    t0 = time.time()
    rows = run_ablations(cfg, samples, args.tags, out_dir=args.out, on_row=lambda r: print(f"{r.tag}: {r.seconds:.0f}s", flush=True))
    print(format_table([(r.tag, r.report) for r in rows]))
    print("\npublished full-scale reference")
    print(format_table([(t, FULL_SCALE_ABLATION[t]) for t in args.tags]))
    full = next((r for r in rows if r.tag == "full"), None)
    if full is not None:
        beaten = [r.tag for r in rows if r.tag != "full" and r.report.mae < full.report.mae]
        print(f"\nfull MAE={full.report.mae:.4f}; settings with lower MAE: {', '.join(beaten) or 'none'}")
    print(f"total seconds={time.time() - t0:.0f}")


if __name__ == "__main__":
    main()
