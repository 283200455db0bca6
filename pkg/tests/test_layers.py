import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hinet import numcore as nc
from hinet.errors import ConfigError, ShapeError
from hinet.layers import (CgcModule, EmbeddingTable, ExpertStack, FeatureEmbedding, FeatureField, GatingNetwork, Mlp,
                          ScenarioAttention, ScenarioExtractionLayer, SeiModule, Tower, cgc_forward, embed_features,
                          san_forward, scenario_layer_forward, sei_forward, tower_forward)


def rng(seed=0):
    return np.random.default_rng(seed)


def np_relu(x):
    return np.maximum(x, 0.0)


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_expert(stack, k, x):
    h = x
    for w, b in zip(stack.W, stack.b):
        h = np_relu(h @ w.data[k] + b.data[k, 0])
    return h


def test_embedding_lookup_and_bad_id():
    t = EmbeddingTable(5, 3, rng(), name="user_id")
    out = t.lookup([4, 0])
    np.testing.assert_array_equal(out.data, t.weights.data[[4, 0]])
    with pytest.raises(IndexError, match="user_id"):
        t.lookup([5])


def test_feature_embedding_concatenates_in_field_order():
    fields = [FeatureField("a", 4, 2), FeatureField("b", 3, 5)]
    emb = FeatureEmbedding(fields, rng())
    assert emb.width == 7
    x = emb(np.array([[1, 2], [3, 0]]))
    np.testing.assert_array_equal(x.data[0, :2], emb.tables[0].weights.data[1])
    np.testing.assert_array_equal(x.data[1, 2:], emb.tables[1].weights.data[0])
    one = embed_features([3, 0], emb)
    np.testing.assert_array_equal(one.data, x.data[1:2])


def test_expert_stack_matches_per_expert_mlp():
    stack = ExpertStack(3, [4, 6, 2], rng())
    x = rng(1).normal(size=(5, 4))
    out = stack(nc.Tensor(x)).data
    assert out.shape == (3, 5, 2)
    for k in range(3):
        np.testing.assert_allclose(out[k], np_expert(stack, k, x), atol=1e-14)
        np.testing.assert_allclose(stack.expert(k)(nc.Tensor(x)).data, out[k], atol=1e-14)


def test_mlp_last_layer_linear():
    m = Mlp([2, 1], rng(), activate_last=False)
    m.W[0].data[:] = [[-1.0], [0.0]]
    out = m(nc.Tensor(np.array([[3.0, 1.0]]))).data
    assert out[0, 0] == -3.0


def test_uniform_gate_has_no_parameters():
    g = GatingNetwork(4, 3, rng(), uniform=True)
    assert g.num_parameters() == 0
    np.testing.assert_array_equal(g(np.ones((2, 3))).data, np.full((2, 4), 0.25))


def test_gate_width_mismatch():
    with pytest.raises(ShapeError):
        GatingNetwork(3, 4, rng())(np.ones((2, 5)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 9), st.integers(0, 10_000))
def test_gate_rows_are_distributions(k, d, seed):
    g = GatingNetwork(k, d, rng(seed))
    w = g(rng(seed + 1).normal(scale=5.0, size=(4, d))).data
    assert np.all(w > 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_sei_matches_numpy_oracle():
    m = SeiModule(3, [4, 5], rng())
    x = rng(2).normal(size=(6, 4))
    w = np_softmax(x @ m.gate.W.data.T)
    expect = sum(w[:, [k]] * np_expert(m.sub_experts, k, x) for k in range(3))
    np.testing.assert_allclose(sei_forward(m, x).data, expect, atol=1e-13)


def test_sei_output_in_convex_hull_of_experts():
    m = SeiModule(4, [3, 2], rng(3))
    x = rng(4).normal(size=(10, 3))
    out = m(nc.Tensor(x)).data
    experts = np.stack([np_expert(m.sub_experts, k, x) for k in range(4)])
    assert np.all(out <= experts.max(axis=0) + 1e-12)
    assert np.all(out >= experts.min(axis=0) - 1e-12)


def test_sei_single_expert_equals_that_expert():
    m = SeiModule(1, [3, 4], rng())
    x = rng(5).normal(size=(3, 3))
    np.testing.assert_allclose(m(nc.Tensor(x)).data, np_expert(m.sub_experts, 0, x), atol=1e-14)


def test_sei_rejects_zero_experts():
    with pytest.raises(ConfigError):
        SeiModule(0, [3, 4], rng())


def test_san_oracle_and_zero_diagonal():
    san = ScenarioAttention(4, 3, rng())
    p = san.weight_matrix().data
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(np.diag(p), 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    for i in range(4):
        logits = san.gates[i].W.data @ san.embedding.weights.data[i]
        np.testing.assert_allclose(p[i, san.others(i)], np_softmax(logits), atol=1e-14)


def test_san_forward_combines_other_scenarios():
    san = ScenarioAttention(3, 2, rng())
    s = [rng(k).normal(size=(4, 5)) for k in range(3)]
    i = 1
    out = san_forward(san.gates[i], san.embedding.weights.data[i], [nc.Tensor(s[m]) for m in san.others(i)])
    w = san.weights(i).data
    np.testing.assert_allclose(out.data, w[0] * s[0] + w[1] * s[2], atol=1e-14)
    with pytest.raises(ShapeError):
        san_forward(san.gates[i], san.embedding.weights.data[i], [nc.Tensor(s[0])])


def layer(m=3, san=True, gated=True, seed=0, d_in=6, width=4):
    return ScenarioExtractionLayer(m, d_in, 2, [2] * m, [], width, san=san, san_dim=3, gated=gated, rng=rng(seed))


def test_scenario_layer_width_bookkeeping():
    assert layer(san=True).out_width == 12
    assert layer(san=False).out_width == 8
    assert layer(m=1, san=True).san is None
    x = rng().normal(size=(5, 6))
    assert layer()(nc.Tensor(x), [0, 1, 2, 0, 1]).shape == (5, 12)


def test_scenario_layer_oracle():
    lay = layer()
    x = rng(7).normal(size=(4, 6))
    ids = np.array([2, 0, 1, 2])
    out = lay(nc.Tensor(x), ids).data
    g = sei_forward(lay.shared, x).data
    s = [sei_forward(m, x).data for m in lay.specific]
    p = lay.san.weight_matrix().data
    for r, i in enumerate(ids):
        a = sum(p[i, m] * s[m][r] for m in range(3))
        np.testing.assert_allclose(out[r], np.concatenate([g[r], s[i][r], a]), atol=1e-13)


def test_san_weights_depend_only_on_scenario_id():
    lay = layer()
    trace_a, trace_b = {}, {}
    lay(nc.Tensor(rng(1).normal(size=(3, 6))), [0, 1, 2], trace_a)
    lay(nc.Tensor(rng(2).normal(size=(5, 6)) * 10), [2, 2, 1, 0, 0], trace_b)
    np.testing.assert_array_equal(trace_a["san"], trace_b["san"])


def test_scenario_layer_functional_matches_batched():
    lay = layer()
    x = rng(3).normal(size=(6, 6))
    ids = np.array([0, 1, 2, 2, 1, 0])
    batched = lay(nc.Tensor(x), ids).data
    for r in range(6):
        one = scenario_layer_forward(lay, x[r:r + 1], ids[r]).data
        np.testing.assert_allclose(one[0], batched[r], atol=1e-13)


def test_gradient_crosses_scenarios_through_san():
    # a batch of scenario-0 rows still trains scenario 1's specific SEI via A_0
    lay = layer()
    x = nc.Tensor(rng(4).normal(size=(3, 6)))
    nc.backward(nc.sum(lay(x, [0, 0, 0])))
    assert np.any(lay.specific[1].sub_experts.W[0].grad != 0)


def test_without_san_other_scenarios_receive_no_gradient():
    lay = layer(san=False)
    x = nc.Tensor(rng(4).normal(size=(3, 6)))
    nc.backward(nc.sum(lay(x, [0, 0, 0])))
    g = lay.specific[1].sub_experts.W[0].grad
    assert g is None or not np.any(g)
    assert np.any(lay.specific[0].sub_experts.W[0].grad != 0)


def test_ungated_layer_has_fewer_parameters_and_uniform_traces():
    gated, plain = layer(gated=True), layer(gated=False)
    n_gate = 4 * 2 * 6  # shared + 3 specific gates, each [2, 6]
    assert gated.num_parameters() - plain.num_parameters() == n_gate
    trace = {}
    plain(nc.Tensor(rng().normal(size=(2, 6))), [0, 1], trace)
    for w in trace["sei"]:
        np.testing.assert_array_equal(w, 0.5)


def test_cgc_oracle():
    m = CgcModule(5, 2, [1, 3], [], 4, rng())
    c = rng(8).normal(size=(3, 5))
    outs = m(nc.Tensor(c))
    assert len(outs) == 2
    for j in range(2):
        experts = [np_expert(m.shared_experts, k, c) for k in range(2)]
        experts += [np_expert(m.task_experts[j], k, c) for k in range(m.n_specific[j])]
        w = np_softmax(c @ m.gates[j].W.data.T)
        assert w.shape[1] == 2 + m.n_specific[j]
        expect = sum(w[:, [k]] * e for k, e in enumerate(experts))
        np.testing.assert_allclose(outs[j].data, expect, atol=1e-13)
        np.testing.assert_allclose(cgc_forward(m, c, j).data, expect, atol=1e-13)


def test_cgc_edge_counts():
    c = nc.Tensor(rng().normal(size=(2, 5)))
    only_shared = CgcModule(5, 2, [0, 0], [], 3, rng())
    a, b = only_shared(c)
    assert a.shape == (2, 3)
    np.testing.assert_allclose(only_shared.gates[0].W.data.shape, (2, 5))
    only_specific = CgcModule(5, 0, [1, 2], [], 3, rng())
    assert only_specific.shared_experts is None
    assert only_specific(c)[1].shape == (2, 3)
    with pytest.raises(ConfigError):
        CgcModule(5, 0, [0, 1], [], 3, rng())
    with pytest.raises(ShapeError):
        only_shared(nc.Tensor(np.ones((2, 4))))


def test_tower_outputs_probabilities():
    t = Tower(4, [3], rng())
    p = tower_forward(t, rng(1).normal(scale=50, size=(20, 4))).data
    assert p.shape == (20, 1)
    assert np.all((p >= 0) & (p <= 1))


def test_tower_zero_weights_gives_half():
    t = Tower(4, [3], rng())
    for p in t.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(t(nc.Tensor(np.ones((2, 4)))).data, 0.5)
