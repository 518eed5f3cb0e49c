import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image

import oracles
from rsonet.data import (
    DataError,
    SamplePair,
    SynthSpec,
    batch_iter,
    contrast,
    dataset_ids,
    load_dataset,
    load_pair,
    synth_generate,
    write_dataset,
)


def _png(path, arr, mode):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def _raw_pair(tmp_path, size=64, seed=0):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (size, size, 3))
    th = rng.integers(0, 256, (size, size))
    gt = np.where(rng.random((size, size)) > 0.5, 255, 0)
    _png(tmp_path / "r.png", rgb, "RGB")
    _png(tmp_path / "t.png", th, "L")
    _png(tmp_path / "g.png", gt, "L")
    return rgb, th, gt


def test_load_pair_no_resample_exact(tmp_path):
    rgb, th, gt = _raw_pair(tmp_path)
    p = load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)
    assert np.array_equal(p.rgb, (rgb.transpose(2, 0, 1) / 255.0).astype(np.float32))
    assert np.array_equal(p.thermal[0], (th / 255.0).astype(np.float32))
    assert np.array_equal(p.gt[0], (gt >= 128).astype(np.float32))
    assert p.id == "r"


def test_gt_threshold_boundary(tmp_path):
    _raw_pair(tmp_path)
    g = np.zeros((64, 64))
    g[0, 0], g[0, 1] = 128, 127
    _png(tmp_path / "g.png", g, "L")
    p = load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)
    assert p.gt[0, 0, 0] == 1 and p.gt[0, 0, 1] == 0


def test_resized_matches_scalar_bilinear(tmp_path):
    _, th, _ = _raw_pair(tmp_path, size=48, seed=2)
    p = load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)
    ref = oracles.bilinear_scalar(th / 255.0, 64, 64)
    assert np.abs(p.thermal[0] - ref).max() < 1 / 255
    assert p.rgb.shape == (3, 64, 64) and set(np.unique(p.gt)) <= {0.0, 1.0}


def test_thermal_gray_rgb_collapses(tmp_path):
    _raw_pair(tmp_path)
    gray = np.random.default_rng(1).integers(0, 256, (64, 64))
    _png(tmp_path / "t.png", np.stack([gray] * 3, -1), "RGB")
    p = load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)
    assert np.array_equal(p.thermal[0], (gray / 255.0).astype(np.float32))


def test_thermal_color_rejected(tmp_path):
    _raw_pair(tmp_path)
    _png(tmp_path / "t.png", np.random.default_rng(1).integers(0, 256, (64, 64, 3)), "RGB")
    with pytest.raises(DataError):
        load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)


def test_unreadable_file(tmp_path):
    _raw_pair(tmp_path)
    (tmp_path / "g.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        load_pair(tmp_path / "r.png", tmp_path / "t.png", tmp_path / "g.png", 64)


def test_sample_pair_invariants():
    with pytest.raises(DataError):
        SamplePair(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)), np.zeros((1, 4, 4)), "x")
    with pytest.raises(DataError):
        SamplePair(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), "x")


# -- synthetic generator ----------------------------------------------------


def test_synth_deterministic():
    a = synth_generate(SynthSpec(count=6, seed=11))
    b = synth_generate(SynthSpec(count=6, seed=11))
    for x, y in zip(a, b):
        assert x.id == y.id and x.regime == y.regime
        assert np.array_equal(x.rgb, y.rgb) and np.array_equal(x.thermal, y.thermal) and np.array_equal(x.gt, y.gt)


def test_synth_pairs_satisfy_invariants():
    for s in synth_generate(SynthSpec(count=20, seed=1)):
        assert s.rgb.shape == (3, 64, 64) and s.thermal.shape == (1, 64, 64) and s.gt.shape == (1, 64, 64)
        assert set(np.unique(s.gt)) <= {0.0, 1.0}
        for arr in (s.rgb, s.thermal):
            assert arr.min() >= 0 and arr.max() <= 1


def test_synth_consistent_modalities_visible():
    spec = SynthSpec(count=40, seed=4, inconsistency=0.0)
    for s in synth_generate(spec):
        assert s.regime == "normal"
        assert contrast(s.rgb, s.gt) > spec.noise_level
        assert contrast(s.thermal, s.gt) > spec.noise_level


def test_synth_hidden_modality_below_noise():
    spec = SynthSpec(count=60, seed=5, inconsistency=1.0)
    for s in synth_generate(spec):
        hidden = s.rgb if s.regime == "rgb-hidden" else s.thermal
        visible = s.thermal if s.regime == "rgb-hidden" else s.rgb
        assert s.regime in ("rgb-hidden", "thermal-hidden")
        assert contrast(hidden, s.gt) < spec.noise_level < contrast(visible, s.gt)


def test_synth_area_range_100_samples():
    spec = SynthSpec(count=100, seed=6)
    areas = [s.gt.mean() for s in synth_generate(spec)]
    assert min(areas) >= spec.min_area and max(areas) <= spec.max_area


def test_synth_challenge_fraction_binomial_bound():
    regimes = Counter(s.regime for s in synth_generate(SynthSpec(count=100, seed=8, inconsistency=0.5)))
    frac = (regimes["rgb-hidden"] + regimes["thermal-hidden"]) / 100
    assert 0.35 <= frac <= 0.65


@pytest.mark.parametrize(
    "kw", [dict(inconsistency=1.5), dict(min_area=0.3, max_area=0.2), dict(max_area=0.6), dict(count=-1)]
)
def test_synth_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_write_and_load_dataset_round_trip(tmp_path):
    samples = synth_generate(SynthSpec(count=3, seed=2))
    write_dataset(tmp_path, samples, seed=2)
    index = json.loads((tmp_path / "index.json").read_text())
    assert [e["id"] for e in index] == [s.id for s in samples] and all(e["seed"] == 2 for e in index)
    loaded = load_dataset(tmp_path, 64)
    for a, b in zip(samples, loaded):
        assert a.id == b.id and a.regime == b.regime
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(a.gt, b.gt)


def test_dataset_missing_dir_and_stray_ids(tmp_path):
    write_dataset(tmp_path, synth_generate(SynthSpec(count=2, seed=0)))
    (tmp_path / "GT" / "syn0001.png").unlink()
    with pytest.raises(DataError, match="syn0001"):
        dataset_ids(tmp_path)
    with pytest.raises(DataError, match="RGB"):
        dataset_ids(tmp_path / "nowhere")


# -- batching ---------------------------------------------------------------


def _ids(n):
    return [SamplePair(np.zeros((3, 2, 2), np.float32), np.zeros((1, 2, 2), np.float32), np.zeros((1, 2, 2), np.float32), f"s{i}") for i in range(n)]


def test_batch_sizes():
    assert [len(b.ids) for b in batch_iter(_ids(10), 4)] == [4, 4, 2]


def test_batch_shuffle_deterministic_and_complete():
    samples = _ids(10)
    a = [i for b in batch_iter(samples, 3, shuffle_seed=5) for i in b.ids]
    b = [i for b in batch_iter(samples, 3, shuffle_seed=5) for i in b.ids]
    c = [i for b in batch_iter(samples, 3, shuffle_seed=6) for i in b.ids]
    assert a == b and a != c
    assert Counter(a) == Counter(s.id for s in samples)


def test_batch_errors():
    with pytest.raises(DataError):
        list(batch_iter([], 2))
    with pytest.raises(ValueError):
        list(batch_iter(_ids(2), 0))


def test_batch_tensors():
    b = next(batch_iter(synth_generate(SynthSpec(count=2, seed=0)), 2))
    assert b.rgb.shape == (2, 3, 64, 64) and b.thermal.shape == (2, 1, 64, 64) and b.gt.shape == (2, 1, 64, 64)
