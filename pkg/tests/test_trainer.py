import numpy as np
import pytest

from hinet import numcore as nc
from hinet.datagen import Dataset, generate, split, six_scenario_config
from hinet.errors import ConfigError, TrainingError
from hinet.models import HiNet, HiNetConfig, build_model
from hinet.trainer import (TrainConfig, TrainLog, batch_loss, checkpoint, compute_loss_weights, dataset_loss,
                           restore, scenario_losses, train)


@pytest.fixture(scope="module")
def data():
    d = generate(six_scenario_config(3000, seed=2))
    tr, va = split(d, 0.8, seed=0)
    return d, tr, va


def small_model(meta, seed=0, **kw):
    return HiNet(HiNetConfig.for_dataset(meta, emb_dim=4, shared_sub_experts=2, specific_sub_experts=2,
                                         expert_width=8, tower_hidden=[4], **kw), seed=seed)


def toy(n_scen=3):
    # 4 records over 3 scenarios, both tasks labelled
    return Dataset([0, 1, 2, 0], [0, 1, 2, 3], [1, 0, 2, 1], [[0, 1], [1, 0], [1, 1], [0, 0]], [1, 0, 1, 1],
                   [1, 0, 0, 1], meta={"n_scenarios": n_scen, "vocab": {"user_id": 4, "item_id": 3,
                                                                        "scenario_id": n_scen, "ctx_0": 2,
                                                                        "ctx_1": 2}})


def test_loss_weights_are_inverse_shares():
    d = Dataset([0, 0, 0, 1], [0] * 4, [0] * 4, np.zeros((4, 2)), [0] * 4, [0] * 4)
    np.testing.assert_allclose(compute_loss_weights(d, 2), [4 / 3, 4.0])
    with pytest.raises(ConfigError, match=r"\[2\]"):
        compute_loss_weights(d, 3)


def test_loss_weights_balance_scenarios(data):
    _, tr, _ = data
    lam = compute_loss_weights(tr, 6)
    # every scenario gets the same total weight
    np.testing.assert_allclose(lam * tr.scenario_counts(6), len(tr))


def np_bce(p, y):
    p = np.clip(p, nc.PROB_EPS, 1 - nc.PROB_EPS)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def test_loss_decomposes_over_records(data):
    d, _, _ = data
    model = small_model(d.meta, seed=1)
    sub = d.subset(np.arange(64))
    lam = np.linspace(0.5, 3.0, 6)
    loss = float(batch_loss(model, sub.features, sub.scenario, sub.labels, lam).data)
    probs = model.predict(sub.features, sub.scenario)
    manual = np.mean(lam[sub.scenario] * np_bce(probs, sub.labels).sum(axis=1))
    assert loss == pytest.approx(manual, abs=1e-10)
    parts = scenario_losses(model, sub.features, sub.scenario, sub.labels, lam)
    assert sum(float(t.data) for t in parts.values()) == pytest.approx(loss, abs=1e-12)


def test_loss_linear_in_weights(data):
    d, _, _ = data
    model = small_model(d.meta)
    sub = d.subset(np.arange(40))
    lam = np.arange(1.0, 7.0)
    a = float(batch_loss(model, sub.features, sub.scenario, sub.labels, lam).data)
    b = float(batch_loss(model, sub.features, sub.scenario, sub.labels, 2.5 * lam).data)
    assert b == pytest.approx(2.5 * a, rel=1e-12)


def test_single_task_scenario_ignores_second_label():
    d = toy()
    model = small_model(d.meta, tasks_per_scenario=[2, 1, 2])
    lam = np.ones(3)
    before = float(batch_loss(model, d.features, d.scenario, d.labels, lam).data)
    flipped = d.labels.copy()
    flipped[1, 1] = 1.0
    after = float(batch_loss(model, d.features, d.scenario, flipped, lam).data)
    assert before == after


def test_sgd_step_descends(data):
    d, _, _ = data
    model = small_model(d.meta)
    sub = d.subset(np.arange(128))
    lam = np.ones(6)
    opt = nc.SGD(lr=1e-3)
    loss = batch_loss(model, sub.features, sub.scenario, sub.labels, lam)
    nc.backward(loss)
    opt.step(model.parameters())
    after = batch_loss(model, sub.features, sub.scenario, sub.labels, lam)
    assert float(after.data) < float(loss.data)


def test_zero_epochs_leaves_model_unchanged(data):
    d, tr, va = data
    model = small_model(d.meta)
    before = model.state()
    model, log = train(model, tr, va, TrainConfig(max_epochs=0))
    assert log.epochs == 0
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_reduces_loss_and_is_deterministic(data):
    d, tr, va = data
    cfg = TrainConfig(max_epochs=3, lr=3e-3, seed=4)
    m1, log1 = train(small_model(d.meta), tr, va, cfg)
    m2, log2 = train(small_model(d.meta), tr, va, cfg)
    assert log1.train_loss[-1] < log1.train_loss[0]
    assert log1.to_csv() == log2.to_csv()
    for k, v in m1.state().items():
        np.testing.assert_array_equal(v, m2.state()[k])


def test_log_csv_excludes_timing_by_default(data):
    log = TrainLog([1.0], [2.0], [{"0/ctr": 0.5}], [0.123], 0)
    assert log.to_csv() == "epoch,train_loss,valid_loss,auc_0/ctr\n0,1.0,2.0,0.5\n"
    assert log.to_csv(include_timing=True).splitlines()[1].endswith(",0.123")


def test_resume_from_checkpoint_matches_uninterrupted(data, tmp_path):
    d, tr, va = data
    cfg = TrainConfig(max_epochs=2, restore_best=False, patience=10, seed=1)
    full, _ = train(small_model(d.meta), tr, va, cfg)

    half_cfg = TrainConfig(max_epochs=1, restore_best=False, patience=10, seed=1)
    half, log = train(small_model(d.meta), tr, va, half_cfg)
    checkpoint(half, tmp_path / "c.bin")
    model, opt, _ = restore(tmp_path / "c.bin")
    assert opt is not None and opt.step_count > 0
    resumed, log = train(model, tr, va, cfg, optimizer=opt, start_epoch=1, log=log)
    assert log.epochs == 2
    for k, v in full.state().items():
        np.testing.assert_array_equal(v, resumed.state()[k])


@pytest.mark.parametrize("patience", [0, 1])
def test_early_stopping_contract(data, patience):
    d, tr, va = data
    cfg = TrainConfig(max_epochs=8, lr=2e-2, patience=patience, seed=0)
    model, log = train(small_model(d.meta), tr, va, cfg)
    best = int(np.argmin(log.valid_loss))
    assert log.best_epoch == best
    if log.epochs < cfg.max_epochs:
        assert log.epochs - 1 - best == patience + 1
    # the restored model is the best one; early stopping watches unweighted log-loss
    assert dataset_loss(model, va, np.ones(6)) == pytest.approx(log.valid_loss[best], rel=1e-12)


def test_early_stopping_can_watch_weighted_objective(data):
    d, tr, va = data
    model, log = train(small_model(d.meta), tr, va, TrainConfig(max_epochs=2, valid_loss="objective"))
    lam = compute_loss_weights(tr, 6)
    assert dataset_loss(model, va, lam) == pytest.approx(min(log.valid_loss), rel=1e-12)
    with pytest.raises(ConfigError):
        TrainConfig(valid_loss="auc").validate()


def test_non_finite_loss_raises(data):
    d, tr, va = data
    model = small_model(d.meta)
    model.towers[0][0].mlp.b[-1].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, tr, va, TrainConfig(max_epochs=1))


@pytest.mark.parametrize("kind", ["shared_bottom", "mmoe"])
def test_baselines_train(data, kind):
    d, tr, va = data
    cfg = HiNetConfig.for_dataset(d.meta, emb_dim=4, expert_width=8, bottom_hidden=[8], tower_hidden=[4])
    _, log = train(build_model(kind, cfg), tr, va, TrainConfig(max_epochs=2, lr=3e-3))
    assert log.train_loss[1] < log.train_loss[0]


def full_model_gradient_errors(model, data, n_coords=24, seed=0, eps=1e-5):
    """(max relative error over unmasked coordinates, number checked) for the full objective."""
    lam = compute_loss_weights(data, data.meta["n_scenarios"])

    def loss():
        return batch_loss(model, data.features, data.scenario, data.labels, lam)

    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.size]
    errors, checked = [], 0
    model.zero_grad()
    nc.backward(loss())
    grads = {id(p): p.grad.reshape(-1).copy() for p in params}
    # only coordinates the loss actually touches (skip unused embedding rows)
    live = [p for p in params if np.any(grads[id(p)])]
    for k in range(n_coords):
        p = live[rng.integers(len(live))]
        idx = [int(rng.choice(np.flatnonzero(grads[id(p)])))]
        analytic = grads[id(p)][idx]
        central, fwd, bwd = nc.numeric_grad(lambda: loss().data, p, eps, idx)
        if nc.relative_error(fwd, bwd)[0] > 1e-3:
            continue  # perturbation crosses a relu kink
        checked += 1
        errors.append(nc.relative_error(analytic, central)[0])
    return max(errors), checked


def test_full_model_gradient_check():
    d = toy()
    model = small_model(d.meta, seed=3)
    err, checked = full_model_gradient_errors(model, d, n_coords=30)
    assert checked >= 20
    assert err < 1e-4
