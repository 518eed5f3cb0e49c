"""Record the golden guidance triple and saliency output of the small
pipeline on a fixed seed.  Run once; the tests compare against the file.

    python tests/make_golden.py
"""

import os
import sys

import numpy as np
import torch

sys.path.insert(0, os.path.dirname(__file__))

from conftest import small_model  # noqa: E402

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "pipeline.npz")


def golden_inputs():
    gen = torch.Generator().manual_seed(1234)
    rgb = torch.rand(2, 3, 64, 64, generator=gen)
    thermal = torch.rand(2, 1, 64, 64, generator=gen)
    return rgb, thermal


@torch.no_grad()
def golden_outputs():
    torch.set_num_threads(1)
    model = small_model(seed=7).eval()
    out = model(*golden_inputs())
    g = out.guidance
    arrays = {name: getattr(g, name).numpy() for name in ("g_r", "g_t", "g_rt", "m_r", "m_t", "m_rt")}
    for i, m in enumerate(out.saliency.level_maps):
        arrays[f"level{i + 1}"] = m.numpy()
    arrays["final"] = out.saliency.final.numpy()
    arrays["rgb_dominant"] = np.array([s.rgb_dominant for s in out.selections])
    return arrays


if __name__ == "__main__":
    os.makedirs(os.path.dirname(GOLDEN), exist_ok=True)
    np.savez(GOLDEN, **golden_outputs())
    print(f"wrote {GOLDEN}")
