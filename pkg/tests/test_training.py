import math

import numpy as np
import pytest

from opera import training
from opera.data import make_blobs
from opera.errors import ConfigError, DivergenceError, NumericError
from opera.numerics import Rng
from opera.training import OptimizerState, RunConfig, cosine_lr, datasets_for, pretrain, sgd_step

SMALL = dict(
    num_classes=3,
    per_class=12,
    dim=6,
    backbone="8,8",
    proj_hidden=8,
    pred_hidden=8,
    embed_dim=4,
    head_hidden=8,
    batch_size=12,
    epochs=4,
)


def small_cfg(**kw):
    return RunConfig(**{**SMALL, **kw})


def small_data(cfg):
    return datasets_for(cfg)[0]


def test_sgd_plain_step():
    state = OptimizerState(0.1, momentum=0.0, weight_decay=0.0)
    params = {"w": np.zeros(3)}
    sgd_step(state, params, {"w": np.ones(3)})
    assert np.array_equal(params["w"], np.full(3, -0.1))


def test_sgd_zero_grad_velocity_decay():
    state = OptimizerState(0.1, momentum=0.5, weight_decay=0.0)
    params = {"w": np.ones(2)}
    state.velocity["w"] = np.array([2.0, -4.0])
    sgd_step(state, params, {"w": np.zeros(2)})
    assert state.velocity["w"].tolist() == [1.0, -2.0]
    assert np.allclose(params["w"], [0.9, 1.2], rtol=0, atol=1e-15)
    state.lr = 0.0
    before = params["w"].copy()
    sgd_step(state, params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], before)


# the heavy-ball recurrence x^2 - (1 + mu - lr) x + mu has real positive roots
# for these settings, so the norm must shrink at every step
@pytest.mark.parametrize("momentum", [0.0, 0.1])
def test_sgd_quadratic_bowl_descends(momentum):
    theta = Rng(0).normal(5)
    params = {"t": theta}
    state = OptimizerState(0.1, momentum=momentum, weight_decay=0.0)
    norms = [np.linalg.norm(theta)]
    for _ in range(100):
        sgd_step(state, params, {"t": params["t"].copy()})
        norms.append(np.linalg.norm(params["t"]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_sgd_rejects_non_finite_without_mutation():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    state = OptimizerState(0.1)
    with pytest.raises(NumericError) as info:
        sgd_step(state, params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    assert "b" in str(info.value)
    assert np.all(params["a"] == 0.0)


def test_weight_decay_term():
    state = OptimizerState(1.0, momentum=0.0, weight_decay=0.5)
    params = {"w": np.array([2.0])}
    sgd_step(state, params, {"w": np.array([0.0])})
    assert params["w"].tolist() == [1.0]


def test_cosine_schedule():
    assert cosine_lr(0.4, 0, 10) == 0.4
    assert abs(cosine_lr(0.4, 10, 10)) < 1e-17
    assert cosine_lr(0.4, 5, 10) == pytest.approx(0.2, abs=1e-16)
    with pytest.raises(ValueError):
        cosine_lr(0.4, 11, 10)


@pytest.mark.parametrize(
    "kw, key",
    [
        (dict(mode="both"), "mode"),
        (dict(arrangement="D"), "arrangement"),
        (dict(batch_size=1), "batch_size"),
        (dict(tau=0.0), "tau"),
        (dict(ema=1.5), "ema"),
        (dict(backbone="8,x"), "backbone"),
    ],
)
def test_config_validation_names_key(kw, key):
    with pytest.raises(ConfigError) as info:
        RunConfig(**kw)
    assert info.value.key == key


@pytest.mark.parametrize("mode", ["fsl", "ssl", "naive", "opera"])
def test_every_mode_runs_and_records(mode):
    cfg = small_cfg(mode=mode)
    _, hist = pretrain(cfg, small_data(cfg))
    assert len(hist.records) == cfg.epochs
    for rec in hist.records:
        assert math.isfinite(rec.loss_total)
        assert abs(rec.loss_total - (rec.loss_self + rec.loss_full)) <= 1e-9
    if mode == "fsl":
        assert all(r.loss_self == 0.0 for r in hist.records)
    if mode == "ssl":
        assert all(r.loss_full == 0.0 for r in hist.records)


@pytest.mark.parametrize("arrangement", ["A", "B", "C"])
def test_opera_descends(arrangement):
    cfg = small_cfg(arrangement=arrangement, epochs=30, lr=0.05)
    _, hist = pretrain(cfg, small_data(cfg))
    assert hist.records[-1].loss_total < hist.records[0].loss_total


def test_zero_learning_rate_freezes_training():
    cfg = small_cfg(lr=0.0, noise_sigma=0.0, scale_lo=1.0, scale_hi=1.0, mask_prob=0.0, batch_size=64, weight_decay=0.0)
    data = small_data(cfg)
    pair = training.build_pair(cfg, data.dim, data.num_classes, Rng(cfg.seed).spawn(1))
    before = {k: v.copy() for k, v in pair.online.named_parameters()}
    _, hist = pretrain(cfg, data, pair=pair)
    for k, v in pair.online.named_parameters():
        assert np.array_equal(v, before[k])
    losses = [r.loss_total for r in hist.records]
    assert max(losses) - min(losses) <= 1e-12


def test_runs_are_deterministic():
    cfg = small_cfg()
    data = small_data(cfg)
    _, h1 = pretrain(cfg, data)
    _, h2 = pretrain(cfg, data)
    assert [r.to_json_dict() for r in h1.records] == [r.to_json_dict() for r in h2.records]


def test_target_untouched_by_optimizer():
    cfg = small_cfg(mode="opera")
    snapshots = {}

    def hook(stage, pair, info):
        current = {k: v.copy() for k, v in pair.target.named_parameters()}
        if stage == "after_optimizer" and "last" in snapshots:
            for k, v in current.items():
                assert np.array_equal(v, snapshots["last"][k])
        snapshots["last"] = current

    pretrain(cfg, small_data(cfg), hook=hook)
    assert "last" in snapshots


def test_naive_matched_constants_neutralize_conflicts():
    cfg = small_cfg(
        mode="naive",
        naive_self_scheme="constant",
        naive_full_scheme="constant",
        naive_self_wp=1.0,
        naive_self_wn=0.5,
        naive_full_wp=0.5,
        naive_full_wn=1.0,
    )
    _, hist = pretrain(cfg, small_data(cfg))
    assert hist.conflict_grads and all(g == 0.0 for g in hist.conflict_grads)


def test_naive_default_schemes_conflict():
    cfg = small_cfg(mode="naive")
    _, hist = pretrain(cfg, small_data(cfg))
    assert max(hist.conflict_grads) > 0.0


def test_divergence_reports_last_good_epoch(monkeypatch):
    cfg = small_cfg(epochs=3)
    real = training.train_step
    calls = {"n": 0}

    def flaky(*args):
        out = real(*args)
        calls["n"] += 1
        if calls["n"] > 5:
            return (float("nan"),) + out[1:]
        return out

    monkeypatch.setattr(training, "train_step", flaky)
    with pytest.raises(DivergenceError) as info:
        pretrain(cfg, small_data(cfg))
    assert info.value.last_good_epoch == info.value.epoch - 1
    assert len(info.value.history.records) == info.value.epoch


def test_trailing_single_sample_is_dropped():
    batches = training._batches(np.arange(9), 4)
    assert [len(b) for b in batches] == [4, 4]
    assert [len(b) for b in training._batches(np.arange(2), 4)] == [2]


def test_csv_datasets(tmp_path):
    from opera.data import save_csv

    ds = make_blobs(2, 5, 3, 0.1, Rng(0))
    save_csv(ds, tmp_path / "a.csv")
    cfg = small_cfg(data_csv=str(tmp_path / "a.csv"), test_fraction=0.2)
    train, test = datasets_for(cfg)
    assert len(train) + len(test) == 10
