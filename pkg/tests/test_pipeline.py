"""In-memory orchestration on a miniature dataset."""

import numpy as np
import pytest

from dsppool.data import SynthSpec, generate
from dsppool.pipeline import (
    RunConfig,
    dsp_params,
    fit_uap,
    fit_victim,
    frame_bank,
    pool_baseline,
    pool_dataset,
    classify_subspaces,
    classify_vectors,
    run_benchmark,
    sequence_noise,
)


def small_spec(**kw):
    base = dict(classes=3, sequences_per_class=6, n_range=(8, 12), d=16,
                signal_dims=8, seed=0)
    base.update(kw)
    return SynthSpec(**base)


def small_cfg(**kw):
    base = dict(p=2, rcg_max_iters=20, seed=0)
    base.update(kw)
    return RunConfig(**base)


def test_frame_bank_shapes():
    ds = generate(small_spec())
    X, y = frame_bank(ds.train)
    assert X.shape[0] == sum(s.n for s in ds.train)
    assert X.shape[1] == 16
    assert len(y) == X.shape[0]
    assert set(np.unique(y)) == {0, 1, 2}


def test_dsp_params_policies():
    ds = generate(small_spec())
    cfg = small_cfg(delta_policy="dataset-mean")
    params = dsp_params(cfg, ds)
    assert params.delta_override >= 2
    cfg2 = small_cfg(delta_policy="global", delta_override=4)
    assert dsp_params(cfg2).delta_override == 4
    with pytest.raises(ValueError):
        dsp_params(small_cfg(delta_policy="dataset-mean"))


def test_sequence_noise_stable_per_sequence():
    ds = generate(small_spec())
    cfg = small_cfg(noise="gaussian")
    seq = ds.sequences[0]
    a = sequence_noise(seq, None, cfg, cfg.seed)
    b = sequence_noise(seq, None, cfg, cfg.seed)
    assert np.array_equal(a, b)
    other = sequence_noise(ds.sequences[1], None, cfg, cfg.seed)
    assert a.shape != other.shape or not np.array_equal(a, other)


def test_end_to_end_small_benchmark():
    out = run_benchmark(small_spec(), small_cfg())
    assert set(out["accuracy"]) == {"dsp", "ap", "mp"}
    for acc in out["accuracy"].values():
        assert 0.0 <= acc <= 1.0
    assert out["victim"].train_accuracy > 0.5
    pert = out["perturbation"]
    assert np.linalg.norm(pert.epsilon) <= pert.rho + 1e-12
    descs, labels, splits = out["descriptors"]
    assert len(descs) == len(labels) == len(splits) == 18


def test_pool_dataset_descriptor_shapes():
    ds = generate(small_spec())
    cfg = small_cfg(noise="gaussian")
    descs, labels, splits = pool_dataset(ds, None, cfg)
    assert all(w.shape == (16, 2) for w in descs)
    acc, pred, true = classify_subspaces(descs, labels, splits, cfg)
    assert len(pred) == np.sum(splits == "test")


def test_baselines_match_pooling_functions():
    ds = generate(small_spec())
    V, labels, splits = pool_baseline(ds, "ap")
    assert np.allclose(V[0], ds.sequences[0].matrix.mean(axis=0))
    V2, _, _ = pool_baseline(ds, "mp")
    assert np.allclose(V2[0], ds.sequences[0].matrix.max(axis=0))
    acc, _, _ = classify_vectors(V, labels, splits, small_cfg())
    assert 0.0 <= acc <= 1.0


def test_benchmark_deterministic():
    a = run_benchmark(small_spec(), small_cfg(), methods=("dsp",))
    b = run_benchmark(small_spec(), small_cfg(), methods=("dsp",))
    assert a["accuracy"]["dsp"] == b["accuracy"]["dsp"]
    da, _, _ = a["descriptors"]
    db, _, _ = b["descriptors"]
    assert np.array_equal(da[0].matrix, db[0].matrix)
