import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from rsonet.backbone import BackboneConfig  # noqa: E402
from rsonet.data import SynthSpec, synth_generate  # noqa: E402
from rsonet.model import ModelConfig, RSONet  # noqa: E402
from rsonet.persistence import RunConfig  # noqa: E402

torch.set_num_threads(1)

SMALL_CHANNELS = (4, 4, 8, 8, 8)


def small_backbone(size=64):
    return BackboneConfig(stage_channels=SMALL_CHANNELS, input_size=size)


def small_model(ablation="full", seed=0, state_dim=4):
    torch.manual_seed(seed)
    return RSONet(ModelConfig(small_backbone(), state_dim, ablation))


def small_run_config(**kw):
    base = dict(backbone=small_backbone(), vss_state_dim=4, steps=4, batch_size=2, eval_every=2, log_every=1)
    base.update(kw)
    return RunConfig(**base)


def fd_check(fn, tensors, seed=0, h=1e-3, coords=12):
    """Central-difference check of ``fn()`` against autograd.

    ``tensors`` are float64 leaves read by ``fn`` (inputs or parameters); they
    are perturbed in place.  The output is contracted with a fixed random
    weighting to get a scalar.  Returns the norm-wise relative error between
    analytic and numeric derivatives over a random subset of coordinates of
    every tensor.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.requires_grad_(True)
    out = fn()
    weight = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    grads = torch.autograd.grad((out * weight).sum(), tensors, allow_unused=True)
    analytic, numeric = [], []
    with torch.no_grad():
        for x, g in zip(tensors, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            idx = torch.randperm(flat.numel(), generator=gen)[:coords]
            for i in idx.tolist():
                old = flat[i].item()
                flat[i] = old + h
                up = (fn() * weight).sum().item()
                flat[i] = old - h
                down = (fn() * weight).sum().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
                analytic.append(g.reshape(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def rand64(*shape, seed=0, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def module_fd_check(module, call, inputs, seed=0, h=1e-5, coords=8, n_params=6):
    """Finite differences through ``call()`` for a float64 module: every
    input plus up to ``n_params`` randomly chosen parameter tensors."""
    module.double()
    params = [p for p in module.parameters()]
    gen = torch.Generator().manual_seed(seed + 101)
    picked = [params[i] for i in torch.randperm(len(params), generator=gen)[:n_params].tolist()]
    return fd_check(call, list(inputs) + picked, seed=seed, h=h, coords=coords)


@pytest.fixture(scope="session")
def synth8():
    return synth_generate(SynthSpec(count=8, size=64, seed=3))


@pytest.fixture
def tiny_model():
    return small_model()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
