"""Overfit the toy configuration on a handful of synthetic pairs.

    python scripts/overfit.py --steps 2000 --samples 8 --out runs/overfit
"""

import argparse
import logging
import time

import numpy as np
import torch

from rsonet.data import SynthSpec, synth_generate
from rsonet.persistence import RunConfig
from rsonet.training import evaluate_model, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=100)
    ap.add_argument("--target-mae", type=float, default=0.05)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    samples = synth_generate(SynthSpec(count=args.samples, size=64, seed=args.seed))
    cfg = RunConfig(steps=args.steps, seed=args.seed, eval_every=args.eval_every, log_every=50)
    t0 = time.time()
    res = fit(cfg, samples, out_dir=args.out)
    rep = evaluate_model(res.model, samples)
    losses = np.array(res.losses)
    print(f"steps={len(losses)} seconds={time.time() - t0:.0f}")
    print(f"first50={losses[:50].mean():.4f} last50={losses[-50:].mean():.4f}")
    print(f"train MAE={rep.mae:.4f} Fb={rep.f_beta:.4f} Sa={rep.s_measure:.4f} Ee={rep.e_measure:.4f}")
    print("PASS" if rep.mae < args.target_mae else "FAIL")


if __name__ == "__main__":
    main()
