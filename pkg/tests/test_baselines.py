"""Baseline learners: degenerate cases, determinism, uplift extraction, IO."""

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from unimvt import autodiff as ad
from unimvt import baselines as bl
from unimvt import datagen as dg
from unimvt.config import ExperimentConfig, TrainConfig
from unimvt.errors import ConfigError


def quick_cfg(seed=0, epochs=3):
    cfg = ExperimentConfig(train=TrainConfig(epochs=epochs, batch=64, seed=seed))
    cfg.net.tower_hidden = (16, 16)
    return cfg


@pytest.fixture(scope="module")
def small_syn():
    spec = replace(dg.PRESETS["syn1"], n_train=1500, n_test=500, seed=33)
    return dg.generate(spec)


def all_control_dataset(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    y = (rng.uniform(size=n) < expit(X[:, 0])).astype(int)
    samples = [dg.Sample(X[i], 0, 0.0, int(y[i])) for i in range(n)]
    return dg.Dataset(samples)


def test_slearner_all_control_matches_plain_ctr_net():
    ds = all_control_dataset()
    cfg = quick_cfg(seed=4)
    model = bl.train_slearner(ds, cfg)
    X = dg.dataset_arrays(ds)[0]

    # oracle: identical net trained on the same (x, t=0) inputs by hand
    rng = np.random.default_rng(4)
    net = ad.init_mlp(rng, "slearner", (5, 16, 16, 1), out_activation="sigmoid")
    inputs = np.column_stack([X, np.zeros(len(X))])
    bl._fit_binary_mlp(net, inputs, dg.dataset_arrays(ds)[3], cfg, rng)
    np.testing.assert_array_equal(model.base_ctr(X), bl._mlp_predict(net, inputs))


def test_slearner_seed_reproducibility(small_syn):
    train_ds, test_ds = small_syn
    X = dg.dataset_arrays(test_ds)[0][:50]
    a = bl.train_slearner(train_ds, quick_cfg(seed=9, epochs=1))
    b = bl.train_slearner(train_ds, quick_cfg(seed=9, epochs=1))
    np.testing.assert_array_equal(a.unit_uplift_scores(X), b.unit_uplift_scores(X))


def test_slearner_predictions_reproduce_training_inputs(small_syn):
    train_ds, _ = small_syn
    model = bl.train_slearner(train_ds, quick_cfg(seed=2, epochs=1))
    X, w, t, y, _, _ = dg.dataset_arrays(train_ds)
    direct = model.outcome_prob(X[:20], t[:20])
    again = model.outcome_prob(X[:20], t[:20])
    np.testing.assert_array_equal(direct, again)


def test_tlearner_null_effect_on_duplicated_rows():
    # same covariates and labels in both arms: expected uplift is zero, so the
    # mean estimate over two training seeds should sit inside fit noise
    rng = np.random.default_rng(7)
    n = 1200
    X = rng.standard_normal((n, 4))
    y = (rng.uniform(size=n) < expit(X[:, 0])).astype(int)
    samples = [dg.Sample(X[i], 0, 0.0, int(y[i])) for i in range(n)]
    samples += [dg.Sample(X[i], 1, 1.0, int(y[i])) for i in range(n)]
    ds = dg.Dataset(samples)
    means = []
    for seed in (1, 2):
        cfg = quick_cfg(seed=seed, epochs=10)
        cfg.train.batch = 128
        means.append(bl.train_tlearner(ds, cfg).unit_uplift_scores(X).mean())
    assert abs(np.mean(means)) < 0.04


def test_tlearner_requires_both_groups():
    with pytest.raises(ConfigError):
        bl.train_tlearner(all_control_dataset(), quick_cfg())


def test_unit_uplift_zero_for_zeroed_final_layer(small_syn):
    train_ds, _ = small_syn
    model = bl.train_slearner(train_ds, quick_cfg(seed=0, epochs=1))
    model.net[-1].W.values[:] = 0.0
    model.net[-1].b.values[:] = 0.0
    assert bl.unit_uplift(model, np.zeros(8)) == 0.0  # 0.5 - 0.5


def test_unit_uplift_hand_built_sigmoid_of_t():
    # f(x, t) = sigmoid(t_normalized); with bounds [0, 1] normalization is identity
    W = np.zeros((3, 1))
    W[2, 0] = 1.0  # only the intensity feature
    net = [ad.Layer(ad.ParamTensor("s.W", W), ad.ParamTensor("s.b", np.zeros(1)), "sigmoid")]
    model = bl.SLearnerModel(net, t_min=0.0, t_max=1.0)
    got = bl.unit_uplift(model, np.array([0.4, -1.0]))
    assert got == pytest.approx(expit(1.0) - expit(0.0), abs=1e-12)
    assert got == pytest.approx(0.23105857863, abs=1e-9)


def test_unit_uplift_matches_two_call_evaluation(small_syn):
    train_ds, test_ds = small_syn
    model = bl.train_tlearner(train_ds, quick_cfg(seed=3, epochs=1))
    x = dg.dataset_arrays(test_ds)[0][7]
    want = float(model.treated_prob(x, 1.0)[0] - model.base_ctr(x)[0])
    assert bl.unit_uplift(model, x) == want


def test_baseline_round_trip(tmp_path, small_syn):
    train_ds, test_ds = small_syn
    X = dg.dataset_arrays(test_ds)[0][:40]
    for trainer, name in ((bl.train_slearner, "s.txt"), (bl.train_tlearner, "t.txt")):
        model = trainer(train_ds, quick_cfg(seed=5, epochs=1))
        path = tmp_path / name
        bl.save_baseline(model, path)
        loaded = bl.load_baseline(path)
        np.testing.assert_array_equal(model.base_ctr(X), loaded.base_ctr(X))
        np.testing.assert_array_equal(model.unit_uplift_scores(X), loaded.unit_uplift_scores(X))
