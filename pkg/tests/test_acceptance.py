"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line in the "acceptance criteria" summary
section. The training-based checks take roughly a quarter of an hour on one
core; run just this file with ``pytest tests/test_acceptance.py -v``.
"""
import time
from itertools import product

import numpy as np
import pytest

from hinet import datagen, experiment, metrics
from hinet import numcore as nc
from hinet.datagen import Dataset, generate, read_dataset, six_scenario_config, write_dataset
from hinet.experiment import ExperimentConfig
from hinet.layers import FeatureField
from hinet.models import HiNet, HiNetConfig, load_parameters, save_parameters
from hinet.trainer import batch_loss, compute_loss_weights, restore

LARGE_SCENARIOS = (0, 1, 2, 3, 5)  # every scenario except e (89k of 22.8M exposures)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------


@pytest.mark.criterion("gradient correctness")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    data = Dataset([0, 1, 2, 1], [0, 1, 2, 3], [2, 0, 1, 1], [[0, 1], [1, 0], [1, 1], [0, 0]], [1, 0, 1, 1],
                   [1, 0, 0, 1])
    meta = {"n_scenarios": 3, "vocab": {"user_id": 4, "item_id": 3, "scenario_id": 3, "ctx_0": 2, "ctx_1": 2}}
    model = HiNet(HiNetConfig.for_dataset(meta, emb_dim=4, expert_width=8, tower_hidden=[4]), seed=11)
    lam = compute_loss_weights(data, 3)

    def loss():
        return batch_loss(model, data.features, data.scenario, data.labels, lam)

    model.zero_grad()
    nc.backward(loss())
    params = [p for p in model.parameters() if p.grad is not None and np.any(p.grad)]
    rng = np.random.default_rng(0)
    errors = []
    while len(errors) < 25:
        p = params[rng.integers(len(params))]
        idx = [int(rng.choice(np.flatnonzero(p.grad)))]
        central, fwd, bwd = nc.numeric_grad(lambda: loss().data, p, 1e-5, idx)
        if nc.relative_error(fwd, bwd)[0] > 1e-3:
            continue  # finite difference straddles a relu kink
        errors.append(nc.relative_error(p.grad.reshape(-1)[idx], central)[0])
    seconds = time.perf_counter() - t0
    record_property("detail", f"max rel err {max(errors):.2e} over {len(errors)} coords, {seconds:.1f}s")
    assert max(errors) < 1e-4
    assert seconds < 60


@pytest.mark.criterion("gating normalization")
def test_gating_normalization(record_property):
    worst, smallest, n_gates = 0.0, 1.0, 0
    for k in range(1000):
        rng = np.random.default_rng(k)
        m = int(rng.integers(2, 5))
        fields = [FeatureField("u", 6, 3), FeatureField("s", m, 2)]
        cfg = HiNetConfig(m, fields, shared_sub_experts=int(rng.integers(1, 4)),
                          specific_sub_experts=int(rng.integers(1, 4)), expert_width=4, cgc_shared=int(rng.integers(1, 3)),
                          cgc_specific=int(rng.integers(0, 3)), tower_hidden=[2])
        model = HiNet(cfg, seed=k)
        for p in model.parameters():
            p.data *= rng.uniform(0.5, 4.0)
        b = int(rng.integers(1, 8))
        scen = rng.integers(0, m, b)
        feats = np.column_stack([rng.integers(0, 6, b), scen])
        trace = {}
        model(feats, scen, trace)
        gates = list(trace["sei"]) + list(trace["cgc"]) + [np.delete(trace["san"], np.arange(m) * (m + 1))
                                                           .reshape(m, m - 1)]
        for g in gates:
            worst = max(worst, float(np.max(np.abs(g.sum(axis=-1) - 1.0))))
            smallest = min(smallest, float(g.min()))
            n_gates += 1
    record_property("detail", f"{n_gates} gate outputs, max |sum-1| {worst:.1e}, min entry {smallest:.1e}")
    assert worst <= 1e-12
    assert smallest > 0


@pytest.mark.criterion("AUC oracle equivalence")
def test_auc_oracle(record_property):
    rng = np.random.default_rng(0)
    mismatches, done = 0, 0
    while done < 200:
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        scores = rng.integers(0, 4, n) / 4.0  # coarse grid, so ties are common
        done += 1
        mismatches += metrics.auc(scores, labels) != brute_auc(scores, labels)
    record_property("detail", f"{mismatches} mismatches in {done} instances")
    assert mismatches == 0


@pytest.mark.criterion("Friedman closed form")
def test_friedman_closed_form(record_property):
    rng = np.random.default_rng(0)
    better = rng.uniform(0.6, 0.9, 10)
    dominated = np.column_stack([better, better - rng.uniform(0.01, 0.1, 10)])
    same = np.column_stack([better, better])
    a, b = metrics.friedman(dominated).statistic, metrics.friedman(same).statistic
    record_property("detail", f"dominant {a!r}, identical {b!r}")
    assert a == 10.0
    assert b == 0.0


@pytest.mark.criterion("label hierarchy")
def test_label_hierarchy(record_property):
    bad = 0
    for seed in range(10):
        d = generate(six_scenario_config(100_000, seed=seed))
        bad += int(np.sum((d.order == 1) & (d.click == 0)))
    record_property("detail", f"{bad} violating rows in 10 x 100k")
    assert bad == 0


@pytest.mark.criterion("calibration")
def test_calibration(record_property):
    d = generate(six_scenario_config(100_000, seed=0))
    _, ctr, ctcvr = datagen.empirical_rates(d, 6)
    ratio = ctr / np.asarray(datagen.REFERENCE_CTR)
    worst = max(abs(ratio[i] - 1) for i in LARGE_SCENARIOS)
    record_property("detail", "CTR/target " + " ".join(f"{r:.3f}" for r in ratio) + f"; worst large {worst:.3f}")
    assert worst <= 0.10
    assert np.all(ctcvr <= ctr)


@pytest.mark.criterion("learning signal")
def test_learning_signal(record_property, tmp_path):
    t0 = time.perf_counter()
    res = experiment.run(ExperimentConfig(output_dir=str(tmp_path / "run")))
    seconds = time.perf_counter() - t0
    aucs = res.report.auc_values()
    record_property("detail", f"mean AUC {res.report.mean_auc():.4f}, min cell {min(aucs.values()):.3f} over "
                              f"{len(aucs)} cells, {seconds:.0f}s")
    assert res.report.mean_auc() >= 0.65
    assert all(a > 0.5 for a in aucs.values())
    assert seconds < 15 * 60


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    base = ExperimentConfig(output_dir=str(tmp_path_factory.mktemp("ablation")))
    return experiment.ablation_suite(base, repeats=5, variants=["full", "no_hierarchy", "no_both_gating"])


@pytest.mark.criterion("directional ablation")
def test_directional_ablation(record_property, ablation):
    ranks = dict(zip(ablation.variants, ablation.friedman_mean.mean_ranks))
    record_property("detail", "mean ranks " + ", ".join(f"{v} {r:.1f}" for v, r in ranks.items())
                    + "; mean AUC " + ", ".join(f"{v} {m:.4f}" for v, m in
                                                 zip(ablation.variants, ablation.mean_auc.mean(axis=0))))
    assert ranks["full"] < ranks["no_hierarchy"]
    assert ranks["full"] < ranks["no_both_gating"]


@pytest.mark.criterion("SAN correlation recovery")
def test_san_recovery(record_property, tmp_path):
    wins, pairs = 0, []
    for seed in range(5):
        cfg = ExperimentConfig(preset="aligned_orthogonal", n_impressions=60_000, seed=seed,
                               output_dir=str(tmp_path / f"s{seed}"))
        res = experiment.run(cfg, write=False)
        w = experiment.attention_map(res.model)
        pairs.append((w[0, 1], w[0, 2]))
        wins += w[0, 1] > w[0, 2]
    record_property("detail", f"a->b beats a->c in {wins}/5 seeds: "
                    + ", ".join(f"{ab:.2f}/{ac:.2f}" for ab, ac in pairs))
    assert wins >= 4


@pytest.mark.criterion("determinism and round trips")
def test_determinism_and_round_trips(record_property, tmp_path):
    cfg = ExperimentConfig(n_impressions=8000, train={"max_epochs": 2}, seed=3)
    a = experiment.run(cfg.replace(output_dir=str(tmp_path / "a")))
    b = experiment.run(cfg.replace(output_dir=str(tmp_path / "b")))
    assert a.train_log.to_csv() == b.train_log.to_csv()
    for name in ("eval.csv", "eval.json", "train_log.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    data = generate(six_scenario_config(5000, seed=1))
    restored, _, _ = restore(tmp_path / "a" / "model.ckpt")
    np.testing.assert_array_equal(restored.predict(data.features, data.scenario),
                                  a.model.predict(data.features, data.scenario))
    save_parameters(a.model, tmp_path / "p.bin")
    for k, v in load_parameters(tmp_path / "p.bin").state().items():
        assert np.array_equal(v, a.model.state()[k])

    write_dataset(data, tmp_path / "d.tsv")
    assert read_dataset(tmp_path / "d.tsv").equals(data)
    record_property("detail", "TrainLog, eval report, checkpoint and dataset are bit-identical")


@pytest.mark.criterion("capacity sweep sanity")
def test_capacity_sweep(record_property, tmp_path):
    # fixed budget without early stopping, so every width gets the same optimisation
    base = ExperimentConfig(output_dir=str(tmp_path),
                            train={"max_epochs": 8, "patience": 8, "restore_best": False})
    rows = experiment.sweep(base, "sub_experts", values=[1, 3, 5])
    losses = [r.train_objective for r in rows]
    record_property("detail", "train objective " + ", ".join(f"K={r.value}: {r.train_objective:.4f}" for r in rows))
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:]))
