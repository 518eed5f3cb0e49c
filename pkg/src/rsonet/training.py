"""Joint training of both stages with RMSprop + momentum and deep supervision."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Batch, SamplePair, batch_iter
from .losses import LossBreakdown, target_pyramid, total_loss
from .metrics import MetricReport, evaluate_pair, mean_report
from .model import RSONet
from .nn import NonFiniteError, grad_of
from .persistence import RunConfig, apply_checkpoint, read_checkpoint, save_checkpoint

log = logging.getLogger("rsonet")


class RMSprop:
    """v <- rho*v + (1-rho)*g^2;  m <- mu*m + g/sqrt(v+eps);  p <- p - lr*m"""

    def __init__(self, named_params, lr: float = 1e-4, momentum: float = 0.9, rho: float = 0.9, eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr, self.momentum, self.rho, self.eps = lr, momentum, rho, eps
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.v[k].mul_(self.rho).addcmul_(g, g, value=1 - self.rho)
            self.m[k].mul_(self.momentum).add_(g / torch.sqrt(self.v[k] + self.eps))
            p.sub_(self.lr * self.m[k])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"optim/v/{k}": t for k, t in self.v.items()}
        out.update({f"optim/m/{k}": t for k, t in self.m.items()})
        return out

    def load_state_tensors(self, tensors) -> None:
        for k in self.params:
            self.v[k].copy_(tensors[f"optim/v/{k}"])
            self.m[k].copy_(tensors[f"optim/m/{k}"])


@dataclass
class StepResult:
    decoder: LossBreakdown
    guidance: LossBreakdown | None
    objective: float
    sel_rgb_frac: float
    lr: float = 0.0

    def log_line(self, step: int) -> str:
        d = self.decoder
        line = (
            f"step={step} total={self.objective:.6f} bce={d.bce:.6f} iou={d.iou:.6f} "
            f"fm={d.fm:.6f} sel_rgb_frac={self.sel_rgb_frac:.4f} lr={self.lr:g}"
        )
        if self.guidance is not None:
            line += f" guidance={self.guidance.total:.6f}"
        return line


def _first_nonfinite(named: dict[str, torch.Tensor]) -> str | None:
    for name, t in named.items():
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def compute_losses(model: RSONet, batch: Batch, guidance_weight: float = 1.0):
    out = model(batch.rgb, batch.thermal)
    maps = out.saliency.level_maps
    dec = total_loss(maps, target_pyramid(batch.gt, maps))
    guid = None
    objective = dec.value
    if out.guidance is not None and guidance_weight > 0:
        gmaps = out.guidance.maps()
        guid = total_loss(gmaps, target_pyramid(batch.gt, gmaps))
        objective = objective + guidance_weight * guid.value
    return out, dec, guid, objective


def train_step(batch: Batch, model: RSONet, opt: RMSprop, guidance_weight: float = 1.0) -> StepResult:
    model.train()
    opt.zero_grad()
    out, dec, guid, objective = compute_losses(model, batch, guidance_weight)
    if not torch.isfinite(objective):
        named = {f"level_map{i + 1}": m for i, m in enumerate(out.saliency.level_maps)}
        if out.guidance is not None:
            named.update(g_r=out.guidance.g_r, g_t=out.guidance.g_t, g_rt=out.guidance.g_rt)
        raise NonFiniteError(_first_nonfinite(named) or "loss")
    grad_of(objective)
    bad = _first_nonfinite({f"grad:{k}": p.grad for k, p in opt.params.items()})
    if bad:
        raise NonFiniteError(bad)
    opt.step()
    opt.zero_grad()
    sels = out.selections
    frac = float(np.mean([s.rgb_dominant for s in sels])) if sels else float("nan")
    return StepResult(dec, guid, float(objective.detach()), frac, opt.lr)


@torch.no_grad()
def predict(model: RSONet, samples: Sequence[SamplePair], batch_size: int = 8) -> list[np.ndarray]:
    model.eval()
    preds = []
    for b in batch_iter(samples, batch_size):
        final = model(b.rgb, b.thermal).saliency.final
        preds.extend(final[:, 0].double().numpy())
    return preds


def evaluate_model(model: RSONet, samples: Sequence[SamplePair], batch_size: int = 8) -> MetricReport:
    preds = predict(model, samples, batch_size)
    return mean_report([evaluate_pair(p, s.gt[0]) for p, s in zip(preds, samples)])


def split_samples(samples: Sequence[SamplePair], val_fraction: float, seed: int):
    if val_fraction <= 0 or len(samples) < 2:
        return list(samples), list(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = min(len(samples) - 1, max(1, int(round(val_fraction * len(samples)))))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def _hflip(batch: Batch) -> Batch:
    return Batch(batch.rgb.flip(-1), batch.thermal.flip(-1), batch.gt.flip(-1), batch.ids)


class EpochSchedule:
    """Batch for global step ``s``: reshuffled each epoch from (seed, epoch) only,
    so a resumed run sees exactly the batches an uninterrupted run would."""

    def __init__(self, samples, batch_size: int, seed: int):
        self.samples, self.batch_size, self.seed = samples, batch_size, seed
        self.per_epoch = math.ceil(len(samples) / batch_size)
        self._epoch, self._batches = None, None

    def __call__(self, step: int) -> Batch:
        epoch, i = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._batches = list(batch_iter(self.samples, self.batch_size, self.seed * 1_000_003 + epoch))
        return self._batches[i]


@dataclass
class FitResult:
    model: RSONet
    losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    best_mae: float = float("inf")
    steps_run: int = 0


TRAIN_LOG_FIELDS = ("step", "lr", "total", "bce", "iou", "fm", "guidance", "sel_rgb_frac")
METRIC_FIELDS = ("step", "mae", "f_beta", "s_measure", "e_measure")


def checkpoint_meta(cfg: RunConfig, step: int, extra: dict | None = None) -> dict:
    meta = {"config": cfg.to_dict(), "step": step, "ablation": cfg.ablation}
    meta.update(extra or {})
    return meta


def build_model(cfg: RunConfig) -> RSONet:
    torch.manual_seed(cfg.seed)
    return RSONet(cfg.model_config())


def fit(
    cfg: RunConfig,
    samples: Sequence[SamplePair],
    out_dir=None,
    resume=None,
    on_step: Callable[[int, StepResult], None] | None = None,
    on_eval: Callable[[dict], bool] | None = None,
) -> FitResult:
    """Train for ``cfg.steps`` steps, evaluating every ``cfg.eval_every``.

    With ``val_fraction == 0`` evaluation runs on the training samples.
    Writes ``best.ckpt``, ``last.ckpt``, ``train_log.csv`` and
    ``metrics.csv`` under ``out_dir`` when given.  ``on_eval`` sees each
    metric row and may return True to stop early.
    """
    if not samples:
        raise ValueError("no training samples")
    train, val = split_samples(samples, cfg.val_fraction, cfg.seed)
    model = build_model(cfg)
    opt = RMSprop(model.named_parameters(), cfg.lr, cfg.momentum, cfg.rho, cfg.eps)
    start = 0
    best = float("inf")
    if resume is not None:
        ck = read_checkpoint(resume)
        apply_checkpoint(model, ck.tensors)
        opt.load_state_tensors(ck.tensors)
        start = int(ck.meta.get("step", 0))
        best = float(ck.meta.get("best_mae", best))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        log_fh = open(out / "train_log.csv", mode, newline="")
        met_fh = open(out / "metrics.csv", mode, newline="")
        log_w, met_w = csv.writer(log_fh), csv.writer(met_fh)
        if resume is None:
            log_w.writerow(TRAIN_LOG_FIELDS)
            met_w.writerow(METRIC_FIELDS)

    def save(name: str, step: int):
        if out is None:
            return
        tensors = dict(model.state_dict())
        tensors.update(opt.state_tensors())
        save_checkpoint(tensors, out / name, checkpoint_meta(cfg, step, {"best_mae": best}))

    result = FitResult(model, best_mae=best)
    schedule = EpochSchedule(train, cfg.batch_size, cfg.seed)
    flip_rng = np.random.default_rng(cfg.seed + 17)
    try:
        if start == 0 and cfg.steps == 0:
            save("best.ckpt", 0)
        for step in range(start, cfg.steps):
            batch = schedule(step)
            if cfg.hflip and flip_rng.random() < 0.5:
                batch = _hflip(batch)
            res = train_step(batch, model, opt, cfg.guidance_weight)
            result.losses.append(res.objective)
            n = step + 1
            if on_step is not None:
                on_step(n, res)
            if n % cfg.log_every == 0 or n == cfg.steps:
                log.info(res.log_line(n))
            if out is not None:
                g = res.guidance.total if res.guidance is not None else ""
                d = res.decoder
                log_w.writerow((n, res.lr, res.objective, d.bce, d.iou, d.fm, g, res.sel_rgb_frac))
            if n % cfg.eval_every == 0:
                rep = evaluate_model(model, val)
                row = {"step": n, "mae": rep.mae, "f_beta": rep.f_beta, "s_measure": rep.s_measure, "e_measure": rep.e_measure}
                result.history.append(row)
                log.info("eval " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
                if out is not None:
                    met_w.writerow([row[k] for k in METRIC_FIELDS])
                if rep.mae < best:
                    best = rep.mae
                    save("best.ckpt", n)
                if on_eval is not None and on_eval(row):
                    result.steps_run += 1
                    break
            result.steps_run += 1
        last = start + result.steps_run if result.steps_run else max(start, cfg.steps)
        if out is not None and not (out / "best.ckpt").exists():
            save("best.ckpt", last)
        save("last.ckpt", last)
    finally:
        if out is not None:
            log_fh.close()
            met_fh.close()
    result.best_mae = best
    return result


def load_model(path) -> tuple[RSONet, RunConfig, dict]:
    ck = read_checkpoint(path)
    if "config" not in ck.meta:
        raise ValueError(f"{path} carries no run configuration")
    cfg = RunConfig.from_dict(ck.meta["config"])
    model = RSONet(cfg.model_config())
    apply_checkpoint(model, ck.tensors)
    model.eval()
    return model, cfg, ck.meta


@dataclass
class AblationRow:
    tag: str
    report: MetricReport
    seconds: float
    final_loss: float


ABLATION_FIELDS = ("setting", "mae", "f_beta", "s_measure", "e_measure", "final_loss", "seconds")


def append_ablation_row(path, row: AblationRow) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ABLATION_FIELDS)
        w.writerow([row.tag, *(f"{v:.6f}" for v in row.report.as_tuple()), f"{row.final_loss:.6f}", f"{row.seconds:.1f}"])


def run_ablations(
    cfg: RunConfig,
    samples: Sequence[SamplePair],
    tags: Sequence[str],
    out_dir=None,
    on_row: Callable[[AblationRow], None] | None = None,
) -> list[AblationRow]:
    """Train and score one model per ablation tag with otherwise identical settings.

    Rows are appended to ``out_dir/ablation.csv`` as they finish, so an
    interrupted sweep keeps its completed settings.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").unlink(missing_ok=True)
    _, val = split_samples(samples, cfg.val_fraction, cfg.seed)
    rows = []
    for tag in tags:
        run_cfg = RunConfig.from_dict({**cfg.to_dict(), "ablation": tag})
        t0 = time.perf_counter()
        res = fit(run_cfg, samples, out_dir=out / tag if out is not None else None)
        rep = evaluate_model(res.model, val)
        row = AblationRow(tag, rep, time.perf_counter() - t0, res.losses[-1] if res.losses else float("nan"))
        rows.append(row)
        if out is not None:
            append_ablation_row(out / "ablation.csv", row)
        if on_row is not None:
            on_row(row)
    return rows
