import numpy as np
import pytest

from renetseg import models
from renetseg.data import LongRangeTaskConfig, SegSample, generate_longrange_task
from renetseg.layers import ConfigError
from renetseg.training import (CONV_STD, NumericError, SgdConfig, evaluate, init_params, predict, train)


@pytest.fixture(scope="module")
def task():
    return generate_longrange_task(12, LongRangeTaskConfig(seed=3))


def test_lr_schedule():
    cfg = SgdConfig(lr=0.001, iterations=400)
    assert all(cfg.lr_at(i) == 0.001 for i in range(1, 201))
    assert all(cfg.lr_at(i) == pytest.approx(0.0001) for i in range(201, 401))


@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch=0), dict(momentum=1.0), dict(iterations=-1), dict(clip=0)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        SgdConfig(**kw)


def test_conv_init_statistics():
    spec = models.build_baseline_fcn(scale=1 / 8)
    params = init_params(spec, 0, dtype=np.float64)
    w = np.concatenate([v.ravel() for k, v in params.items() if k.endswith(".w")])
    assert w.size >= 100_000
    assert abs(w.mean()) < 3 * CONV_STD / np.sqrt(w.size)
    assert abs(w.std() / CONV_STD - 1) < 0.02
    assert not any(v.any() for k, v in params.items() if k.endswith(".b"))


def test_renet_and_irnn_init():
    for cell in ("lstm", "irnn"):
        spec = models.build_compact_hrenet(cell=cell, mlfb=True, norm="batch")
        params = init_params(spec, 1)
        ren = {k: v for k, v in params.items() if k.startswith("renet1.")}
        assert all(np.abs(v).max() <= 0.2 for k, v in ren.items() if not k.endswith("rnn.U"))
        if cell == "irnn":
            for k, v in ren.items():
                if k.endswith(".U"):
                    np.testing.assert_array_equal(v, np.eye(v.shape[0]))
                if k.endswith(".b"):
                    assert not v.any()
        assert all((params[k] == 1).all() for k in params if k.endswith("gamma"))


def test_init_is_seeded():
    spec = models.build_compact_hrenet()
    a, b, c = init_params(spec, 5), init_params(spec, 5), init_params(spec, 6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_single_sample_overfit(task):
    spec = models.build_nrenet(labels=4, min_size=(64, 64))
    result = train(spec, init_params(spec, 0), task[:1],
                   SgdConfig(lr=0.01, iterations=100, batch=1, crop=(64, 64), flip=False))
    losses = np.array(result.losses)
    assert losses.min() < 0.05
    means = losses[:50].reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(means) < 0), means


def test_all_frozen_leaves_weights_identical(task):
    spec = models.build_compact_hrenet()
    spec = spec.with_frozen(ly.name for ly in spec.layers if ly.kind in ("conv", "renet"))
    params = init_params(spec, 0)
    result = train(spec, params, task, SgdConfig(lr=0.1, iterations=3, batch=2, crop=(32, 32)))
    assert all(np.array_equal(result.params[k], params[k]) for k in params)


def test_partial_freeze_skips_only_frozen(task):
    spec = models.build_compact_hrenet().with_frozen(["conv1", "conv2"])
    params = init_params(spec, 0)
    result = train(spec, params, task, SgdConfig(lr=0.1, iterations=2, batch=2, crop=(32, 32)))
    for k in params:
        same = np.array_equal(result.params[k], params[k])
        assert same == (models.layer_of(k) in ("conv1", "conv2")), k


def test_worker_count_bit_identical(task):
    spec = models.build_compact_hrenet(mlfb=True, norm="batch")
    params = init_params(spec, 0)
    runs = [train(spec, params, task, SgdConfig(lr=0.02, iterations=4, batch=3, crop=(48, 48), workers=k))
            for k in (1, 4)]
    assert runs[0].losses == runs[1].losses
    for k in params:
        np.testing.assert_array_equal(runs[0].params[k], runs[1].params[k])


def test_clipping_bounds_first_step(task):
    spec = models.build_compact_fcn()
    params = init_params(spec, 0)
    cfg = SgdConfig(lr=1.0, iterations=1, batch=2, crop=(32, 32), clip=1e-3)
    step = train(spec, params, task, cfg).params
    norm = np.sqrt(sum(((step[k] - params[k]).astype(np.float64) ** 2).sum() for k in params))
    assert norm <= 1e-3 * (1 + 1e-5)


def test_non_finite_loss_saves_diagnostic(task, tmp_path):
    spec = models.build_compact_fcn()
    params = init_params(spec, 0)
    params["conv8.b"][:] = np.nan
    with pytest.raises(NumericError):
        train(spec, params, task, SgdConfig(iterations=2, batch=1, crop=(16, 16)), diagnostic_dir=tmp_path / "diag")
    assert (tmp_path / "diag" / "weights.rnseg").exists()


def test_evaluate_batched_matches_per_sample(task):
    spec = models.build_compact_hrenet()
    params = init_params(spec, 0)
    small = SegSample(task[0].image[:, :10, :12], task[0].labels[:10, :12])
    data = list(task[:5]) + [small]
    batched = evaluate(spec, params, data, chunk=2)
    cm = sum(np.bincount(s.labels.ravel().astype(int) * 4 + predict(spec, params, s.image).ravel(),
                         minlength=16).reshape(4, 4) for s in data)
    np.testing.assert_array_equal(batched.confusion, cm)
    with pytest.raises(ConfigError):
        evaluate(spec, params, [])
