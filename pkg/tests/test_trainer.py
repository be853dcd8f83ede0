import math

import numpy as np
import pytest

from miplma.data import Bag, Dataset, DatasetMeta, GenConfig, generate
from miplma.exceptions import ConfigurationError
from miplma.model import init_params
from miplma.trainer import (
    MomentumSGD, TrainConfig, accuracy, cosine_lr, mil_mode_adapter, pll_mode_adapter, predict,
    sweep, train,
)

SMALL = dict(feature_dim=6, attention_dim=5, batch_size=4)


@pytest.fixture(scope="module")
def tiny():
    return generate(GenConfig(m=16, k=3, d=4, n_range=(2, 5), r=1, seed=4, name="tiny"))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.01, 0, 100) == 0.01
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005, abs=1e-15)
    assert cosine_lr(0.05, 1, 100) == pytest.approx(0.05 * 0.5 * (1 + math.cos(math.pi / 100)), abs=1e-15)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0, abs=1e-18)


def test_momentum_sgd_hand_steps():
    params = init_params(2, 2, feature_dim=2, attention_dim=2, seed=0)
    theta0 = params.classifier.bc.copy()
    opt = MomentumSGD(params, momentum=0.5, weight_decay=0.1)
    g = {name: np.ones_like(p) for name, p in params.named().items()}
    opt.step(g, lr=0.2)
    v1 = 1 + 0.1 * theta0
    theta1 = theta0 - 0.2 * v1
    np.testing.assert_allclose(params.classifier.bc, theta1, rtol=0, atol=1e-15)
    opt.step(g, lr=0.2)
    v2 = 0.5 * v1 + 1 + 0.1 * theta1
    np.testing.assert_allclose(params.classifier.bc, theta1 - 0.2 * v2, rtol=0, atol=1e-15)


def test_gradient_clipping_rescales_to_the_cap():
    params = init_params(2, 2, feature_dim=2, attention_dim=2, seed=0)
    theta0 = {name: p.copy() for name, p in params.named().items()}
    n_entries = sum(p.size for p in theta0.values())
    opt = MomentumSGD(params, momentum=0.0, weight_decay=0.0, clip=1.0)
    opt.step({name: np.full_like(p, 3.0) for name, p in theta0.items()}, lr=1.0)
    # every entry moves by 3 / ||g|| = 3 / (3 sqrt(N))
    for name, p in params.named().items():
        np.testing.assert_allclose(theta0[name] - p, 1 / math.sqrt(n_entries), rtol=1e-12)
    small = MomentumSGD(params, momentum=0.0, weight_decay=0.0, clip=1e6)
    before = params.classifier.bc.copy()
    small.step({name: np.full_like(p, 3.0) for name, p in theta0.items()}, lr=0.5)
    np.testing.assert_allclose(before - params.classifier.bc, 1.5, rtol=1e-15)


def test_zero_learning_rate_single_epoch(tiny):
    cfg = TrainConfig(epochs=1, lr=0.0, lam=0.0, seed=1, **SMALL)
    params, report, weights = train(cfg, tiny)
    ref = init_params(4, 3, 6, (), 5, seed=1)
    for a, b in zip(params.named().values(), ref.named().values()):
        np.testing.assert_array_equal(a, b)
    # alpha = 0 at t = T = 1: weights equal the renormalised predictions
    from miplma.model import predict_bag
    for bag in tiny.bags:
        p = predict_bag(ref, bag.instances, report.tau_final)[0]
        expect = np.zeros(3)
        c = list(bag.candidates)
        expect[c] = p[c] / p[c].sum()
        np.testing.assert_allclose(weights[bag.id], expect, rtol=0, atol=1e-12)


def test_training_is_deterministic(tiny):
    cfg = TrainConfig(epochs=3, seed=2, **SMALL)
    a = train(cfg, tiny)
    b = train(cfg, tiny)
    assert a[1].epochs == b[1].epochs
    for x, y in zip(a[0].named().values(), b[0].named().values()):
        np.testing.assert_array_equal(x, y)


def test_report_records_schedule(tiny, tmp_path):
    cfg = TrainConfig(epochs=3, tau0=2.0, eval_every=1, **SMALL)
    _, report, _ = train(cfg, tiny, tiny)
    assert [r["tau"] for r in report.epochs] == [2.0 * 0.95, 2.0 * 0.95 ** 2, 2.0 * 0.95 ** 3]
    assert all("test_accuracy" in r for r in report.epochs)
    assert report.tau_final == report.epochs[-1]["tau"]
    report.write_jsonl(tmp_path / "r.jsonl")
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 3


def test_no_anneal_pins_temperature(tiny):
    _, report, _ = train(TrainConfig(epochs=2, anneal=False, **SMALL), tiny)
    assert [r["tau"] for r in report.epochs] == [1.0, 1.0]


def test_weights_stay_on_simplex_every_batch(tiny):
    calls = []

    def hook(t, b, weights):
        weights.check(atol=1e-10)
        calls.append((t, b))

    train(TrainConfig(epochs=2, **SMALL), tiny, on_batch=hook)
    assert calls == [(t, b) for t in (1, 2) for b in range(4)]


@pytest.mark.parametrize("kw", [
    {"epochs": 0}, {"batch_size": 0}, {"lr": -0.1}, {"momentum": 1.0}, {"mode": "both"},
    {"margin_variant": "max"}, {"tau0": 0.0}, {"tau_decay": 1.5}, {"lam": -1.0},
    {"grad_clip": -1.0},
])
def test_invalid_configs(kw, tiny):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(**{**SMALL, **kw}), tiny)


def test_mil_adapter_projects_to_true_label():
    ds = Dataset(DatasetMeta(1, 4), (Bag("a", [[0.0]], [1, 3], 3),))
    out = mil_mode_adapter(ds)
    assert out.bags[0].candidates == (3,)
    with pytest.raises(ConfigurationError):
        mil_mode_adapter(Dataset(DatasetMeta(1, 4), (Bag("a", [[0.0]], [1, 3]),)))


def test_mil_mode_rejects_partial_labels(tiny):
    with pytest.raises(ConfigurationError, match="tiny-"):
        train(TrainConfig(mode="mil", epochs=1, **SMALL), tiny)


def test_mil_mode_weights_are_one_hot(tiny):
    ds = mil_mode_adapter(tiny)
    _, _, weights = train(TrainConfig(mode="mil", epochs=2, **SMALL), ds)
    for bag in ds.bags:
        expect = np.zeros(3)
        expect[bag.true_label] = 1.0
        np.testing.assert_array_equal(weights[bag.id], expect)


def test_pll_mode_needs_singleton_bags(tiny):
    with pytest.raises(ConfigurationError):
        pll_mode_adapter(tiny)
    single = generate(GenConfig(m=12, k=3, d=4, n_range=(1, 1), r=None, q=0.3, seed=0))
    _, report, _ = train(TrainConfig(mode="pll", epochs=2, **SMALL), single)
    assert len(report.epochs) == 2


def test_predict_ties_go_to_lowest_index():
    params = init_params(2, 3, feature_dim=2, attention_dim=2)
    for arr in params.named().values():
        arr[:] = 0.0
    assert predict(params, np.ones((2, 2)), 1.0) == 0


def test_accuracy_counts_hits(tiny):
    params = init_params(4, 3, feature_dim=6, attention_dim=5)
    hits = sum(predict(params, b, 0.5) == b.true_label for b in tiny.bags)
    assert accuracy(params, tiny, 0.5) == hits / 16


def test_sweep_rows(tiny):
    base = TrainConfig(epochs=1, **SMALL)
    rows = sweep(base, "lam", [0.0, 1.0], tiny, seeds=[0, 1], ratio=0.75)
    assert [r["value"] for r in rows] == [0.0, 1.0]
    for r in rows:
        assert r["n_ok"] == 2 and not r["errors"]
        assert r["mean_accuracy"] == pytest.approx(np.mean(r["accuracies"]))
        assert r["std_accuracy"] == pytest.approx(np.std(r["accuracies"], ddof=1))


def test_sweep_records_failing_cells(tiny):
    rows = sweep(TrainConfig(epochs=1, **SMALL), "tau0", [-1.0], tiny, seeds=[0])
    assert rows[0]["n_ok"] == 0 and rows[0]["errors"]


def test_sweep_rejects_unknown_parameter(tiny):
    with pytest.raises(ConfigurationError):
        sweep(TrainConfig(), "lr", [0.1], tiny, seeds=[0])
