"""Command line: train, eval, infer, synth, ablate.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
mismatched files), 3 numeric abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .metrics import MissingFilesError, evaluate_dir, format_table, write_csv
from .model import ABLATIONS
from .nn import NonFiniteError, upsample_bilinear
from .persistence import CheckpointError, ConfigError, RunConfig

log = logging.getLogger("rsonet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_config(path) -> RunConfig:
    return RunConfig.load(path)


def _train_like(args, ablation: str | None = None):
    from .training import evaluate_model, fit, split_samples

    try:
        cfg = _load_config(args.config)
        if ablation is not None:
            cfg = RunConfig.from_dict({**cfg.to_dict(), "ablation": ablation})
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc)), None, None
    try:
        samples = data_mod.load_dataset(args.data, cfg.backbone.input_size)
    except data_mod.DataError as exc:
        return _fail(EXIT_DATA, str(exc)), None, None
    if not samples:
        return _fail(EXIT_DATA, f"no samples under {args.data}"), None, None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    try:
        res = fit(cfg, samples, out_dir=out, resume=getattr(args, "resume", None))
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, f"numeric abort: {exc}"), None, None
    except CheckpointError as exc:
        return _fail(EXIT_CONFIG, f"cannot resume: {exc}"), None, None
    _, val = split_samples(samples, cfg.val_fraction, cfg.seed)
    return EXIT_OK, res, evaluate_model(res.model, val)


def cmd_train(args) -> int:
    code, _, report = _train_like(args)
    if code == EXIT_OK:
        print(f"final M={report.mae:.4f} Fb={report.f_beta:.4f} Sa={report.s_measure:.4f} Ee={report.e_measure:.4f}")
    return code


def cmd_ablate(args) -> int:
    from .training import AblationRow, append_ablation_row

    t0 = time.perf_counter()
    code, res, report = _train_like(args, ablation=args.setting)
    if code != EXIT_OK:
        return code
    print(format_table([(args.setting, report)]))
    final_loss = res.losses[-1] if res.losses else float("nan")
    append_ablation_row(Path(args.out) / "ablation.csv", AblationRow(args.setting, report, time.perf_counter() - t0, final_loss))
    return EXIT_OK


def cmd_eval(args) -> int:
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            return _fail(EXIT_DATA, f"not a directory: {d}")
    try:
        summary, rows = evaluate_dir(args.pred, args.gt)
    except MissingFilesError as exc:
        return _fail(EXIT_DATA, str(exc))
    except (FileNotFoundError, data_mod.DataError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if args.table:
        print(format_table(rows + [("mean", summary)]))
    print(summary.row(3))
    if args.csv:
        write_csv(args.csv, rows, summary)
    return EXIT_OK


def _load_inputs(rgb_path, thermal_path, size: int):
    rgb = data_mod.read_rgb(rgb_path).transpose(2, 0, 1) / 255.0
    thermal = data_mod.read_gray(thermal_path)[None] / 255.0
    if rgb.shape[1:] != thermal.shape[1:]:
        raise data_mod.DataError("rgb and thermal images differ in size")
    hw = rgb.shape[1:]
    rgb_t = torch.from_numpy(data_mod.resize_chw(rgb, size)).clamp(0, 1)[None]
    th_t = torch.from_numpy(data_mod.resize_chw(thermal, size)).clamp(0, 1)[None]
    return rgb_t, th_t, hw


def cmd_infer(args) -> int:
    from .training import load_model

    try:
        model, cfg, _ = load_model(args.ckpt)
    except (OSError, CheckpointError, ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, f"cannot load checkpoint {args.ckpt}: {exc}")
    try:
        rgb, thermal, (h, w) = _load_inputs(args.rgb, args.thermal, cfg.backbone.input_size)
    except data_mod.DataError as exc:
        return _fail(EXIT_DATA, str(exc))
    with torch.no_grad():
        out = model(rgb, thermal)
    final = upsample_bilinear(out.saliency.final, h, w)[0, 0].clamp(0, 1).numpy()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_gray(args.out, final)
    if out.selections:
        sel = out.selections[0]
        print(f"selected={sel.choice.value} delta_r={sel.delta_r:.6f} delta_t={sel.delta_t:.6f}")
    if args.dump_guidance:
        if out.guidance is None:
            return _fail(EXIT_CONFIG, f"ablation {cfg.ablation!r} has no guidance maps to dump")
        d = Path(args.dump_guidance)
        d.mkdir(parents=True, exist_ok=True)
        g = out.guidance
        for name, m in (("g_r", g.g_r), ("g_t", g.g_t), ("g_rt", g.g_rt)):
            arr = m[0, 0].numpy()
            data_mod.save_gray(d / f"{name}.png", arr)
            np.save(d / f"{name}.npy", arr)
        sel = out.selections[0]
        info = {
            "selected": sel.choice.value,
            "delta_r": sel.delta_r,
            "delta_t": sel.delta_t,
            "tie_broken": sel.tie_broken,
            "m_r": float(g.m_r[0]),
            "m_t": float(g.m_t[0]),
            "m_rt": float(g.m_rt[0]),
        }
        (d / "selection.json").write_text(json.dumps(info, indent=1) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = data_mod.SynthSpec(
            count=args.count, size=args.size, seed=args.seed, inconsistency=args.inconsistency, noise_level=args.noise
        )
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    data_mod.write_dataset(args.out, data_mod.synth_generate(spec), seed=spec.seed)
    print(f"wrote {spec.count} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsonet", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--data", required=True, help="dataset root with RGB/, T/, GT/")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a prediction directory against ground truth")
    p.add_argument("--pred", required=True, help="directory of 8-bit saliency maps")
    p.add_argument("--gt", required=True, help="directory of 8-bit masks with matching names")
    p.add_argument("--csv", default=None, help="write per-image and mean metrics to this CSV")
    p.add_argument("--table", action="store_true", help="also print an aligned per-image table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a saliency map for one RGB-T pair")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train/ablate")
    p.add_argument("--rgb", required=True, help="RGB image")
    p.add_argument("--thermal", required=True, help="thermal image (gray)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--dump-guidance", default=None, metavar="DIR", help="write guidance maps and the selection here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a synthetic RGB-T dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--inconsistency", type=float, default=0.3, help="probability that one modality hides the object")
    p.add_argument("--noise", type=float, default=0.04, help="Gaussian pixel noise level")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and evaluate one ablation setting")
    p.add_argument("--setting", required=True, choices=ABLATIONS, help="ablation tag")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--data", required=True, help="dataset root with RGB/, T/, GT/")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, int(os.environ.get("RSONET_THREADS", "1"))))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
