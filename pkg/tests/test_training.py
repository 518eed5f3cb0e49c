import csv
import math

import pytest
import torch

from conftest import small_model, small_run_config
from rsonet.data import SynthSpec, batch_iter, synth_generate
from rsonet.nn import NonFiniteError
from rsonet.persistence import read_checkpoint
from rsonet.training import (
    METRIC_FIELDS,
    RMSprop,
    TRAIN_LOG_FIELDS,
    EpochSchedule,
    compute_losses,
    fit,
    load_model,
    split_samples,
    train_step,
)


# -- optimizer --------------------------------------------------------------


def test_rmsprop_scalar_closed_form():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = RMSprop([("p", p)], lr=1e-2)
    p.grad = torch.ones_like(p)
    opt.step()
    m = 1 / math.sqrt(0.1 + 1e-8)
    assert opt.v["p"].item() == pytest.approx(0.1, abs=1e-15)
    assert opt.m["p"].item() == pytest.approx(m, rel=1e-12)
    assert p.item() == pytest.approx(2.0 - 1e-2 * m, rel=1e-12)
    # second step with the same gradient
    p.grad = torch.ones_like(p)
    opt.step()
    v2 = 0.9 * 0.1 + 0.1
    m2 = 0.9 * m + 1 / math.sqrt(v2 + 1e-8)
    assert p.item() == pytest.approx(2.0 - 1e-2 * (m + m2), rel=1e-12)


def test_rmsprop_zero_and_missing_grad_unchanged():
    a, b = torch.nn.Parameter(torch.ones(3)), torch.nn.Parameter(torch.ones(2))
    opt = RMSprop([("a", a), ("b", b)])
    a.grad = torch.zeros(3)
    opt.step()
    assert torch.equal(a, torch.ones(3)) and torch.equal(b, torch.ones(2))


def test_rmsprop_state_round_trip():
    p = torch.nn.Parameter(torch.ones(2))
    opt = RMSprop([("p", p)])
    p.grad = torch.tensor([1.0, -2.0])
    opt.step()
    other = RMSprop([("p", torch.nn.Parameter(torch.ones(2)))])
    other.load_state_tensors(opt.state_tensors())
    assert torch.equal(other.v["p"], opt.v["p"]) and torch.equal(other.m["p"], opt.m["p"])


# -- steps ------------------------------------------------------------------


def _batch(samples, n=2):
    return next(batch_iter(samples, n))


def test_decoder_loss_leaves_guidance_untouched(synth8):
    model = small_model()
    _, dec, _, objective = compute_losses(model, _batch(synth8), guidance_weight=0.0)
    objective.backward()
    for name, p in model.named_parameters():
        if name.startswith("guidance."):
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert model.decoder.heads[0].weight.grad.abs().sum() > 0


def test_zero_gradient_parameters_unchanged_after_step(synth8):
    model = small_model()
    before = {k: v.clone() for k, v in model.named_parameters() if k.startswith("guidance.")}
    opt = RMSprop(model.named_parameters())
    train_step(_batch(synth8), model, opt, guidance_weight=0.0)
    for k, v in before.items():
        assert torch.equal(v, dict(model.named_parameters())[k]), k


def test_step_reports_losses(synth8):
    model = small_model()
    res = train_step(_batch(synth8), model, RMSprop(model.named_parameters()))
    assert res.guidance is not None
    assert res.objective == pytest.approx(res.decoder.total + res.guidance.total, rel=1e-5)
    assert 0.0 <= res.sel_rgb_frac <= 1.0
    line = res.log_line(3)
    for key in ("step=3", "total=", "bce=", "iou=", "fm=", "sel_rgb_frac=", "lr="):
        assert key in line


def test_nonfinite_names_tensor(synth8):
    model = small_model()
    with torch.no_grad():
        model.decoder.heads[0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="level_map1"):
        train_step(_batch(synth8), model, RMSprop(model.named_parameters()))


# -- schedule and split -----------------------------------------------------


def test_epoch_schedule_covers_each_epoch(synth8):
    sched = EpochSchedule(synth8, 3, seed=1)
    assert sched.per_epoch == 3
    for epoch in range(2):
        ids = [i for s in range(3) for i in sched(epoch * 3 + s).ids]
        assert sorted(ids) == sorted(s.id for s in synth8)
    again = EpochSchedule(synth8, 3, seed=1)
    assert again(4).ids == sched(4).ids


def test_split_disjoint(synth8):
    train, val = split_samples(synth8, 0.25, seed=0)
    assert len(val) == 2 and len(train) == 6
    assert not {s.id for s in train} & {s.id for s in val}
    same_train, same_val = split_samples(synth8, 0.0, seed=0)
    assert same_train == same_val == list(synth8)


# -- fit --------------------------------------------------------------------


def test_fit_deterministic(synth8):
    cfg = small_run_config(steps=3)
    a = fit(cfg, synth8)
    b = fit(cfg, synth8)
    assert a.losses == b.losses
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_fit_zero_steps_writes_initial(tmp_path, synth8):
    cfg = small_run_config(steps=0)
    fit(cfg, synth8, out_dir=tmp_path)
    ck = read_checkpoint(tmp_path / "best.ckpt")
    assert ck.meta["step"] == 0
    init = small_model()
    for k, v in init.state_dict().items():
        assert torch.equal(ck.tensors[k], v), k


def test_fit_outputs(tmp_path, synth8):
    cfg = small_run_config(steps=4, eval_every=2)
    res = fit(cfg, synth8, out_dir=tmp_path)
    assert len(res.history) == cfg.steps // cfg.eval_every
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRAIN_LOG_FIELDS and len(rows) == 5
    assert [float(r[2]) for r in rows[1:]] == pytest.approx(res.losses)
    with open(tmp_path / "metrics.csv") as fh:
        met = list(csv.reader(fh))
    assert tuple(met[0]) == METRIC_FIELDS and [int(r[0]) for r in met[1:]] == [2, 4]
    model, cfg_back, meta = load_model(tmp_path / "last.ckpt")
    assert cfg_back == cfg and meta["step"] == 4
    for k, v in res.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)
    assert (tmp_path / "best.ckpt").exists()


def test_resume_splices_identical_trace(tmp_path, synth8):
    full = fit(small_run_config(steps=4), synth8)
    fit(small_run_config(steps=2), synth8, out_dir=tmp_path)
    rest = fit(small_run_config(steps=4), synth8, out_dir=tmp_path, resume=tmp_path / "last.ckpt")
    assert rest.steps_run == 2
    with open(tmp_path / "train_log.csv") as fh:
        logged = [float(r[2]) for r in list(csv.reader(fh))[1:]]
    assert logged == pytest.approx(full.losses, rel=0, abs=0)
    for k, v in full.model.state_dict().items():
        assert torch.equal(rest.model.state_dict()[k], v), k


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit(small_run_config(), [])


def test_fit_without_guidance_stage(synth8):
    res = fit(small_run_config(steps=2, ablation="wo-so-add"), synth8)
    assert len(res.losses) == 2 and all(math.isfinite(x) for x in res.losses)


def test_hflip_changes_trace_deterministically(synth8):
    a = fit(small_run_config(steps=3, hflip=True), synth8).losses
    b = fit(small_run_config(steps=3, hflip=True), synth8).losses
    c = fit(small_run_config(steps=3), synth8).losses
    assert a == b and a != c


def test_overfit_smoke():
    """Loss falls over a few dozen steps on two samples."""
    samples = synth_generate(SynthSpec(count=2, seed=9, inconsistency=0.0))
    res = fit(small_run_config(steps=30, eval_every=30, lr=1e-3), samples)
    assert sum(res.losses[-5:]) < sum(res.losses[:5])


def test_early_stop_on_eval(tmp_path, synth8):
    seen = []
    res = fit(small_run_config(steps=6, eval_every=2), synth8, out_dir=tmp_path, on_eval=lambda row: seen.append(row) or True)
    assert res.steps_run == 2 and len(res.losses) == 2 and [r["step"] for r in seen] == [2]
    assert read_checkpoint(tmp_path / "last.ckpt").meta["step"] == 2
