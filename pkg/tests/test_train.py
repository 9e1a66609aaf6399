import numpy as np
import pytest

from cgmm_enhance.checkpoint import load_checkpoint
from cgmm_enhance.exceptions import ConfigurationError, NumericalAbortError
from cgmm_enhance.manifest import read_manifest, stable_records
from cgmm_enhance.net import NetParams, forward, head_columns, init_params
from cgmm_enhance.train import (
    Objective,
    TrainingData,
    clipping_enabled,
    evaluate_loss,
    hypothesis_diversity,
    net_config_for,
    pretrain_wta,
    train_baseline,
    train_cgmm,
    train_model,
    utterance_loss,
    wta_k_schedule,
    wta_learning_rate,
    wta_total_epochs,
)

from conftest import random_spectrum, toy_utterance


def _scaled_data(gain=0.3, n_train=4, seed=0):
    rng = np.random.default_rng(seed)
    train = []
    for i in range(n_train):
        X = random_spectrum(rng)
        train.append(toy_utterance(f"train_{i}", X, gain * X))
    return TrainingData(train=train, validation=list(train))


def _noisy_data(seed=0, n_train=6, n_val=2):
    rng = np.random.default_rng(seed)

    def make(prefix, count):
        out = []
        for i in range(count):
            S = random_spectrum(rng)
            X = S + 0.8 * random_spectrum(rng)
            out.append(toy_utterance(f"{prefix}_{i}", X, S))
        return out

    return TrainingData(train=make("train", n_train), validation=make("val", n_val))


def _bimodal_data():
    rng = np.random.default_rng(5)
    X = random_spectrum(rng)
    utts = []
    for i in range(2):
        utts.append(toy_utterance(f"low_{i}", X, 0.2 * X))
        utts.append(toy_utterance(f"high_{i}", X, 0.8 * X))
    return TrainingData(train=utts, validation=list(utts))


def test_k_schedule_desk_defaults():
    ks = [wta_k_schedule(4, epoch, 6) for epoch in range(1, 25)]
    assert ks == [4] * 6 + [2] * 6 + [1] * 12


def test_k_schedule_full_scale_constants():
    assert wta_k_schedule(4, 25, 25) == 4
    assert wta_k_schedule(4, 26, 25) == 2
    assert wta_k_schedule(4, 51, 25) == 1


def test_wta_lr_schedule(tiny_config):
    tc = tiny_config.train
    assert wta_total_epochs(tc) == 24 + 9
    assert wta_learning_rate(24, tc) == tc.lr_init
    assert wta_learning_rate(25, tc) == tc.lr_init / 2
    last = wta_learning_rate(wta_total_epochs(tc), tc)
    assert last >= tc.lr_floor
    assert last / 2 < tc.lr_floor


def test_clipping_policy(tiny_config):
    tc = tiny_config.train
    assert clipping_enabled(tc, Objective("cgmm"))
    assert not clipping_enabled(tc, Objective("cgmm", constant_variance=True))
    assert not clipping_enabled(tc, Objective("mse"))
    tiny_config.set("grad_clip", "on")
    assert clipping_enabled(tc, Objective("mse"))


def test_baseline_overfits_scaled_target(tiny_config):
    for key, value in (("max_epochs", 150), ("lr_init", 0.01), ("early_stop_patience", 150),
                       ("weight_decay", 0.0)):
        tiny_config.set(key, value)
    data = _scaled_data()
    net_cfg = net_config_for(tiny_config, 1)
    initial = evaluate_loss(init_params(net_cfg, tiny_config.seed), net_cfg, data.validation, Objective("mse"))
    result = train_baseline(tiny_config, data)
    assert result.best_val_loss < 0.05 * initial
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
    assert result.checkpoint.is_file()


def test_training_is_deterministic(tiny_config, tmp_path):
    tiny_config.set("model", "cgmm4")
    data = _noisy_data()
    a = train_model(tiny_config, data, out_dir=tmp_path / "a")
    b = train_model(tiny_config, data, out_dir=tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert stable_records(read_manifest(a.manifest)) == stable_records(read_manifest(b.manifest))
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]


def test_manifest_records_run(tiny_config):
    tiny_config.set("model", "cgmm1")
    result = train_model(tiny_config, _noisy_data())
    records = read_manifest(result.manifest)
    events = [r["event"] for r in records]
    assert events[0] == "run_start"
    assert events[-1] == "run_end"
    assert events.count("epoch") == len(result.history)
    start = records[0]
    assert start["model"] == "cgmm1"
    assert len(start["dataset_sha256"]) == 64
    assert "out_dir" not in start["config"]
    assert all("timestamp" in r for r in records)


def test_constant_variance_cgmm1_matches_baseline(tiny_config, tmp_path):
    tiny_config.set("max_epochs", 4)
    data = _noisy_data(seed=3)
    wf = train_baseline(tiny_config, data, out_dir=tmp_path / "wf")
    cgmm = train_cgmm(tiny_config, data, 1, constant_variance=True, out_dir=tmp_path / "cg")
    assert [h["val_loss"] for h in wf.history] == [h["val_loss"] for h in cgmm.history]
    assert [h["train_loss"] for h in wf.history] == [h["train_loss"] for h in cgmm.history]
    assert np.array_equal(wf.params.theta, cgmm.params.theta)
    assert load_checkpoint(cgmm.checkpoint).constant_variance


def test_wta_gradient_only_reaches_winner_columns(tiny_config):
    net_cfg = net_config_for(tiny_config, 4)
    params = init_params(net_cfg, 0)
    utt = _noisy_data().train[0]
    _, grad, winners = utterance_loss(params, net_cfg, utt, Objective("wta"), k=1)
    assert len(winners) == 1
    g = NetParams(theta=grad, layout=params.layout)
    mask_grad = g.view("mask.weight")
    for comp in range(4):
        cols = head_columns(net_cfg, comp)
        if comp == winners[0]:
            assert np.any(mask_grad[:, cols] != 0.0)
        else:
            assert np.all(mask_grad[:, cols] == 0.0)
            assert np.all(g.view("mask.bias")[cols] == 0.0)
    assert np.all(g.view("var.weight") == 0.0)
    assert np.all(g.view("mix.weight") == 0.0)


def _bimodal_settings(config):
    for key, value in (("lr_init", 0.05), ("wta_epochs", 60), ("wta_k_halve_every", 1),
                       ("wta_lr_halve_every", 1), ("lr_floor", 0.01), ("weight_decay", 0.0),
                       ("max_epochs", 60), ("early_stop_patience", 60)):
        config.set(key, value)


def test_wta_recovers_both_modes_where_mse_averages(tiny_config, tmp_path):
    _bimodal_settings(tiny_config)
    data = _bimodal_data()
    X = data.train[0].noisy

    wta = pretrain_wta(tiny_config, data, 2, out_dir=tmp_path / "wta")
    p, _ = forward(wta.params, wta.net_config, X)
    means = sorted(float(np.mean(m)) for m in p.masks)
    assert means[0] == pytest.approx(0.2, abs=0.05)
    assert means[1] == pytest.approx(0.8, abs=0.05)

    wf = train_baseline(tiny_config, data, out_dir=tmp_path / "wf")
    p_wf, _ = forward(wf.params, wf.net_config, X)
    assert float(np.mean(p_wf.masks)) == pytest.approx(0.5, abs=0.05)


def test_pretrained_model_uses_finetune_lr(tiny_config):
    for key, value in (("model", "cgmm4-pre"), ("wta_epochs", 2), ("wta_k_halve_every", 1),
                       ("lr_floor", 5e-4), ("max_epochs", 2)):
        tiny_config.set(key, value)
    result = train_model(tiny_config, _noisy_data())
    assert result.checkpoint.name == "cgmm4-pre.ckpt"
    assert (result.checkpoint.parent / "wta.ckpt").is_file()
    assert result.history[0]["lr"] == tiny_config.train.finetune_lr
    start = read_manifest(result.manifest)[0]
    assert start["init"] == "wta.ckpt"

    wta = load_checkpoint(result.checkpoint.parent / "wta.ckpt")
    tuned = load_checkpoint(result.checkpoint)
    assert wta.net_config == tuned.net_config


def test_pretrain_requires_multiple_components(tiny_config):
    with pytest.raises(ConfigurationError):
        pretrain_wta(tiny_config, _noisy_data(), 1)


def test_empty_validation_rejected(tiny_config):
    data = _noisy_data()
    with pytest.raises(ConfigurationError):
        train_baseline(tiny_config, TrainingData(train=data.train, validation=[]))


def test_numerical_abort_points_to_manifest(tiny_config, monkeypatch):
    import cgmm_enhance.train as train_module

    def exploding(*args, **kwargs):
        raise NumericalAbortError("梯度含 1 个非有限值")

    monkeypatch.setattr(train_module, "adam_step", exploding)
    with pytest.raises(NumericalAbortError) as info:
        train_baseline(tiny_config, _noisy_data())
    assert info.value.manifest_path is not None
    assert info.value.last_checkpoint is None
    records = read_manifest(info.value.manifest_path)
    assert records[-1]["event"] == "abort"


def test_hypothesis_diversity(tiny_config):
    data = _noisy_data()
    net_cfg = net_config_for(tiny_config, 4)
    params = init_params(net_cfg, 0)
    assert hypothesis_diversity(params, net_cfg, data.validation) > 0.0

    collapsed = params.copy()
    collapsed.view("mask.weight")[...] = 0.0
    collapsed.view("mask.bias")[...] = 0.0
    assert hypothesis_diversity(collapsed, net_cfg, data.validation) == 0.0
    single = net_config_for(tiny_config, 1)
    assert hypothesis_diversity(init_params(single, 0), single, data.validation) == 0.0


def test_diversity_logged_for_pretrained_and_scratch_runs(tiny_config, tmp_path):
    _bimodal_settings(tiny_config)
    tiny_config.set("max_epochs", wta_total_epochs(tiny_config.train))
    data = _bimodal_data()

    wta = pretrain_wta(tiny_config, data, 2, out_dir=tmp_path / "wta")
    scratch = train_cgmm(tiny_config, data, 2, out_dir=tmp_path / "scratch")
    logged = {}
    for name, result in (("wta", wta), ("scratch", scratch)):
        records = [r for r in read_manifest(result.manifest) if r["event"] == "diversity"]
        assert len(records) == 1
        logged[name] = records[0]["value"]
        assert logged[name] == pytest.approx(hypothesis_diversity(result.params, result.net_config, data.validation))
    # 两个假设分别停在 0.2 与 0.8 附近
    assert logged["wta"] >= 0.5
    assert 0.0 <= logged["scratch"] <= 1.0
