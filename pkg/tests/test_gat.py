import numpy as np
import pytest

from relprobe import autodiff as ad
from relprobe.autodiff import Tensor, gradcheck
from relprobe.gat import (
    GATLayer,
    GATParams,
    NodeBatch,
    attention_coefficients,
    gat_layer,
    init_gat,
    predict,
)
from relprobe.graph_builder import DailyGraph


def make_graph(adjacency, weights=None, date="2024-01-02"):
    adjacency = np.asarray(adjacency, dtype=bool)
    if weights is None:
        weights = adjacency.astype(np.float64) * 0.7
    return DailyGraph(date=date, attr=Tensor(weights),
                      adjacency=adjacency, weights=Tensor(weights),
                      n_articles=1)


def np_leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def np_elu(x):
    return np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1)


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- single layer ------------------------------------------------------------

def test_isolated_node_self_loop_only():
    rng = np.random.default_rng(0)
    layer = GATLayer(w=Tensor(rng.standard_normal((3, 3))),
                     a=Tensor(rng.standard_normal((6, 1))))
    graph = make_graph(np.zeros((2, 2)))
    h = Tensor(rng.standard_normal((2, 3)))
    alpha, wh, _ = attention_coefficients(layer, h, graph)
    np.testing.assert_allclose(np.diag(alpha.data), [1.0, 1.0], atol=1e-6)
    out = gat_layer(layer, h, graph)
    np.testing.assert_allclose(out.data, np_elu(wh.data), rtol=1e-6)


def test_two_node_scalar_oracle():
    # d_in = d_out = 1, hand-set scalars, verify all three equations
    w = 2.0
    a_l, a_r = 0.5, -1.0
    layer = GATLayer(w=Tensor([[w]]), a=Tensor([[a_l], [a_r]]))
    adjacency = np.array([[False, True], [False, False]])
    wt = np.array([[0.0, 0.9], [0.0, 0.0]])
    graph = make_graph(adjacency, wt)
    h = np.array([[1.0], [-0.5]])
    out = gat_layer(layer, Tensor(h), graph)

    wh = h * w
    e = np_leaky(a_l * wh + a_r * wh.T)  # e[u,v] = leaky(a_l wh_u + a_r wh_v)
    # node 0 attends to {0 (self), 1}; node 1 only itself
    alpha0 = np_softmax(np.array([[e[0, 0], e[0, 1]]]))[0]
    msg0 = alpha0[0] * 1.0 * wh[0, 0] + alpha0[1] * wt[0, 1] * wh[1, 0]
    msg1 = 1.0 * 1.0 * wh[1, 0]
    np.testing.assert_allclose(out.data[:, 0], np_elu(np.array([msg0, msg1])),
                               rtol=1e-6)


def test_doubling_edge_weights_doubles_non_self_messages():
    rng = np.random.default_rng(1)
    layer = GATLayer(w=Tensor(rng.standard_normal((2, 2))),
                     a=Tensor(rng.standard_normal((4, 1))))
    adjacency = np.array([[False, True, True],
                          [False, False, True],
                          [False, False, False]])
    wt = rng.uniform(0.5, 1.0, (3, 3)) * adjacency
    h = Tensor(rng.standard_normal((3, 2)))

    def pre_sigma(weights):
        graph = make_graph(adjacency, weights)
        alpha, wh, _ = attention_coefficients(layer, h, graph)
        self_loop = np.diag((~adjacency.diagonal()).astype(float))
        eff = weights + self_loop
        return (alpha.data * eff) @ wh.data, alpha.data

    m1, a1 = pre_sigma(wt)
    m2, a2 = pre_sigma(2 * wt)
    np.testing.assert_allclose(a1, a2, atol=1e-7)  # alpha unaffected by W^t
    self_part = np.diag(np.diag(a1)) @ (h.data @ layer.w.data)
    np.testing.assert_allclose(m2 - self_part, 2 * (m1 - self_part), rtol=1e-6)


def test_zero_weight_edge_message_is_zero():
    rng = np.random.default_rng(2)
    layer = GATLayer(w=Tensor(rng.standard_normal((2, 2))),
                     a=Tensor(rng.standard_normal((4, 1))))
    adjacency = np.array([[False, True], [False, False]])
    wt = np.zeros((2, 2))
    graph = make_graph(adjacency, wt)
    h = Tensor(rng.standard_normal((2, 2)))
    alpha, wh, _ = attention_coefficients(layer, h, graph)
    eff = wt + np.eye(2)
    contrib = alpha.data[0, 1] * eff[0, 1] * wh.data[1]
    np.testing.assert_array_equal(contrib, np.zeros(2))


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_logits_rejected_with_edge():
    layer = GATLayer(w=Tensor([[1.0]]), a=Tensor([[1e308], [1e308]]))
    graph = make_graph(np.array([[False, True], [True, False]]))
    h = Tensor(np.array([[1e308], [1.0]]))
    with pytest.raises(ValueError, match=r"\(0, 0\)"):
        gat_layer(layer, h, graph)


def test_alpha_rows_sum_to_one_over_neighbors():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        layer = GATLayer(w=Tensor(rng.standard_normal((3, 4))),
                         a=Tensor(rng.standard_normal((8, 1))))
        adjacency = rng.random((n, n)) > 0.5
        np.fill_diagonal(adjacency, False)
        graph = make_graph(adjacency, rng.random((n, n)) * adjacency)
        h = Tensor(rng.standard_normal((n, 3)))
        alpha, _, mask = attention_coefficients(layer, h, graph)
        np.testing.assert_allclose((alpha.data * mask).sum(axis=1),
                                   np.ones(n), atol=1e-6)


# --- full predictor --------------------------------------------------------------

def make_batch(n=4, d=3, seed=0, params_seed=1, layers=2):
    rng = np.random.default_rng(seed)
    adjacency = rng.random((n, n)) > 0.6
    np.fill_diagonal(adjacency, False)
    graph = make_graph(adjacency, (rng.random((n, n)) * adjacency))
    params = init_gat(d, hidden=5, n_layers=layers,
                      rng=np.random.default_rng(params_seed))
    batch = NodeBatch(features=Tensor(rng.standard_normal((n, d))), graph=graph)
    return params, batch


def test_zero_classifier_gives_uniform():
    params, batch = make_batch()
    params.w_out.data[:] = 0.0
    params.b_out.data[:] = 0.0
    probs = predict(params, batch)
    np.testing.assert_allclose(probs.data, np.full((4, 3), 1 / 3), atol=1e-7)


def test_prediction_rows_sum_to_one():
    for seed in range(10):
        params, batch = make_batch(seed=seed, params_seed=seed + 50)
        probs = predict(params, batch)
        np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(4), atol=1e-6)


def test_three_node_two_layer_scalarized_oracle():
    # full numpy replica of the layer equations
    params, batch = make_batch(n=3, d=2, seed=7, params_seed=8)
    probs = predict(params, batch).data

    h = batch.features.data.astype(np.float64)
    adjacency = batch.graph.adjacency
    wt = batch.graph.weights.data.astype(np.float64)
    mask = adjacency | np.eye(3, dtype=bool)
    for layer in params.layers:
        wh = h @ layer.w.data
        d_out = wh.shape[1]
        s_l = wh @ layer.a.data[:d_out]
        s_r = wh @ layer.a.data[d_out:]
        e = np_leaky(s_l + s_r.T)
        logits = np.where(mask, e, -1e9)
        alpha = np_softmax(logits)
        eff = wt * adjacency + np.diag(~adjacency.diagonal()).astype(float)
        h = np_elu((alpha * eff) @ wh)
    expected = np_softmax(h @ params.w_out.data + params.b_out.data)
    np.testing.assert_allclose(probs, expected, rtol=1e-4, atol=1e-6)


def test_permutation_equivariance():
    params, batch = make_batch(n=5, d=3, seed=9, params_seed=10)
    probs = predict(params, batch).data
    perm = np.random.default_rng(11).permutation(5)
    graph = batch.graph
    pgraph = make_graph(graph.adjacency[np.ix_(perm, perm)],
                        graph.weights.data[np.ix_(perm, perm)])
    pbatch = NodeBatch(features=Tensor(batch.features.data[perm]), graph=pgraph)
    pprobs = predict(params, pbatch).data
    np.testing.assert_allclose(pprobs, probs[perm], rtol=1e-5, atol=1e-7)


def test_isolated_node_independent_of_others():
    params, batch = make_batch(n=4, d=3, seed=12, params_seed=13)
    adjacency = batch.graph.adjacency.copy()
    adjacency[0, :] = False  # node 0 receives nothing
    graph = make_graph(adjacency, batch.graph.weights.data * adjacency)
    base = predict(params, NodeBatch(features=batch.features, graph=graph)).data
    other = batch.features.data.copy()
    other[1:] += 5.0
    alt = predict(params, NodeBatch(features=Tensor(other), graph=graph)).data
    np.testing.assert_allclose(alt[0], base[0], atol=1e-6)


def test_gat_gradcheck():
    params, batch = make_batch(n=3, d=3, seed=14, params_seed=15)
    tensors = list(params.named().values()) + [batch.features, batch.graph.weights]
    names = list(params.named().keys()) + ["features", "weights"]

    def f(*ts):
        layers = [GATLayer(w=ts[0], a=ts[1]), GATLayer(w=ts[2], a=ts[3])]
        p = GATParams(layers=layers, w_out=ts[4], b_out=ts[5])
        graph = DailyGraph(date="", attr=ts[7], adjacency=batch.graph.adjacency,
                           weights=ts[7], n_articles=1)
        return predict(p, NodeBatch(features=ts[6], graph=graph)).sum()

    report = gradcheck(f, tensors, step=1e-5, tol=1e-4, names=names)
    assert report.passed, str(report)
