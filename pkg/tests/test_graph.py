import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cdsr.graph import build_transition_matrix, graph_from_edges, layer_denominator, propagate

from conftest import make_history
from oracles import dense_normalized, dense_propagate


def dense_oracle(n, edges, E0, K, rule="k+1"):
    return dense_propagate(n, edges, E0, K, rule), dense_normalized(n, edges)


def random_edges(rng, n, p=0.2):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j, int(rng.choice([1, -1]))))
    return edges


# build_transition_matrix ----------------------------------------------------


def test_same_feedback_pair_positive():
    g = build_transition_matrix([make_history("u", [("A", 0, 1), ("A", 1, 1)])], "A", (2, 0))
    assert g.edges == {(0, 1): 1, (1, 0): 1}


def test_different_feedback_pair_negative():
    g = build_transition_matrix([make_history("u", [("A", 0, 1), ("A", 1, -1)])], "A", (2, 0))
    assert g.edges[(0, 1)] == -1 and g.edges[(1, 0)] == -1


def test_non_adjacent_items_have_no_edge():
    g = build_transition_matrix([make_history("u", [("A", 0, 1), ("A", 1, 1), ("A", 2, 1)])], "A", (3, 0))
    assert (0, 2) not in g.edges


def test_conflicting_pair_cancels():
    hs = [make_history("u1", [("A", 0, 1), ("A", 1, 1)]), make_history("u2", [("A", 1, -1), ("A", 0, 1)])]
    g = build_transition_matrix(hs, "A", (2, 0))
    assert g.edges == {}


def test_majority_sign_wins():
    hs = [make_history(f"u{k}", [("A", 0, 1), ("A", 1, f)]) for k, f in enumerate([1, 1, -1])]
    g = build_transition_matrix(hs, "A", (2, 0))
    assert g.edges[(0, 1)] == 1


def test_sum_of_signs_oracle():
    rng = np.random.default_rng(0)
    hs = []
    for u in range(40):
        hs.append(make_history(f"u{u}", [("A", int(rng.integers(6)), int(rng.choice([1, -1])))
                                         for _ in range(int(rng.integers(2, 10)))]))
    counter = {}
    for h in hs:
        s = h.seq_A
        for k in range(len(s) - 1):
            i, j = s[k].item_id, s[k + 1].item_id
            if i == j:
                continue
            key = frozenset((i, j))
            counter[key] = counter.get(key, 0) + (1 if s[k].feedback == s[k + 1].feedback else -1)
    expected = {}
    for key, c in counter.items():
        if c:
            i, j = sorted(key)
            expected[(i, j)] = expected[(j, i)] = int(np.sign(c))
    assert build_transition_matrix(hs, "A", (6, 0)).edges == expected


def test_graph_c_offsets_b_items():
    g = build_transition_matrix([make_history("u", [("A", 1, 1), ("B", 0, -1)])], "C", (3, 2))
    assert g.n == 5
    assert g.edges == {(1, 3): -1, (3, 1): -1}


def test_graph_b_uses_only_b_sequence():
    h = make_history("u", [("B", 0, 1), ("A", 0, 1), ("B", 1, 1)])
    g = build_transition_matrix([h], "B", (1, 2))
    assert g.edges == {(0, 1): 1, (1, 0): 1}


def test_empty_history_list_is_valid():
    g = build_transition_matrix([], "C", (3, 4))
    assert g.n == 7 and g.num_edges == 0
    assert np.all(g.dense_normalized() == 0)


def test_self_transition_ignored():
    g = build_transition_matrix([make_history("u", [("A", 0, 1), ("A", 0, -1)])], "A", (1, 0))
    assert g.edges == {}


# normalize_adjacency --------------------------------------------------------


def test_two_node_normalization():
    g = graph_from_edges(2, [(0, 1, 1)])
    assert np.array_equal(g.dense_normalized(), [[0, 1], [1, 0]])


def test_path_normalization_matches_dense():
    g = graph_from_edges(3, [(0, 1, 1), (1, 2, -1)])
    W = g.dense_normalized()
    assert W[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    assert W[1, 2] == pytest.approx(-1 / np.sqrt(2), abs=1e-12)
    assert W[0, 2] == 0
    _, oracle = dense_oracle(3, [(0, 1, 1), (1, 2, -1)], np.zeros((3, 1)), 0)
    assert np.allclose(W, oracle, atol=1e-15)


def test_isolated_node_row_zero():
    g = graph_from_edges(4, [(0, 1, 1), (1, 2, -1)])
    W = g.dense_normalized()
    assert np.all(W[3] == 0) and np.all(W[:, 3] == 0) and np.all(np.isfinite(W))


def test_self_loop_rejected():
    with pytest.raises(ValueError):
        graph_from_edges(2, [(1, 1, 1)])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 15), st.integers(0, 10_000))
def test_graph_invariants(n, seed):
    rng = np.random.default_rng(seed)
    g = graph_from_edges(n, random_edges(rng, n, 0.3))
    W = g.dense_normalized()
    S = g.dense_signs()
    assert np.array_equal(W, W.T) and np.array_equal(S, S.T)
    assert np.all(np.diag(S) == 0)
    assert np.array_equal(g.degree, (S != 0).sum(axis=1))
    for (i, j) in g.edges:
        assert abs(W[i, j]) == pytest.approx(1 / np.sqrt(g.degree[i] * g.degree[j]), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_spectral_bound_positive_graphs(n, seed):
    rng = np.random.default_rng(seed)
    edges = [(i, j, 1) for i, j, _ in random_edges(rng, n, 0.4)]
    _, What = dense_oracle(n, edges, np.zeros((n, 1)), 0)
    assert np.max(np.abs(np.linalg.eigvalsh(What))) <= 1 + 1e-12


# propagate ------------------------------------------------------------------


def test_k0_is_identity():
    E0 = np.random.default_rng(0).normal(size=(3, 4))
    g = graph_from_edges(3, [(0, 1, 1)])
    assert np.array_equal(propagate(g, E0, 0), E0)


def test_edgeless_graph_mean_over_layers():
    E0 = np.random.default_rng(1).normal(size=(4, 2))
    g = graph_from_edges(4, [])
    assert np.array_equal(propagate(g, E0, 2), E0 / 3)


def test_two_node_positive_edge():
    g = graph_from_edges(2, [(0, 1, 1)])
    out = propagate(g, np.eye(2), 1)
    assert np.allclose(out[0], [0.5, 0.5])


def test_two_node_negative_edge():
    g = graph_from_edges(2, [(0, 1, -1)])
    out = propagate(g, np.eye(2), 1)
    assert np.allclose(out[0], [0.5, -0.5])


def test_dimension_mismatch():
    g = graph_from_edges(3, [(0, 1, 1)])
    with pytest.raises(ValueError):
        propagate(g, np.zeros((4, 2)), 1)


def test_negative_k_rejected():
    with pytest.raises(ValueError):
        propagate(graph_from_edges(2, []), np.zeros((2, 2)), -1)


def test_layer_denominator_rules():
    assert [layer_denominator(k, "k+1") for k in range(4)] == [1, 2, 3, 4]
    assert [layer_denominator(k, "k") for k in range(4)] == [1, 1, 2, 3]
    with pytest.raises(ValueError):
        layer_denominator(1, "avg")


@pytest.mark.parametrize("rule", ["k+1", "k"])
@pytest.mark.parametrize("K", [0, 1, 2, 3])
def test_sparse_matches_dense_oracle(K, rule):
    rng = np.random.default_rng(100 * K + len(rule))
    for _ in range(10):
        n = int(rng.integers(1, 51))
        edges = random_edges(rng, n, float(rng.uniform(0.02, 0.3)))
        E0 = rng.normal(size=(n, 5))
        expected, _ = dense_oracle(n, edges, E0, K, rule)
        got = propagate(graph_from_edges(n, edges), E0, K, rule)
        assert np.max(np.abs(got - expected)) < 1e-10


def test_sign_flip_negates_odd_layers():
    rng = np.random.default_rng(3)
    n = 12
    edges = random_edges(rng, n, 0.3)
    flipped = [(i, j, -s) for i, j, s in edges]
    E0 = rng.normal(size=(n, 3))
    _, What = dense_oracle(n, edges, E0, 0)
    out = propagate(graph_from_edges(n, flipped), E0, 1)
    assert np.allclose(out, E0 / 2 - What @ E0 / 2, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 15), st.integers(0, 10_000), st.integers(0, 3))
def test_permutation_equivariance(n, seed, K):
    rng = np.random.default_rng(seed)
    edges = random_edges(rng, n, 0.3)
    E0 = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    # node perm[i] in the new labelling is node i in the old one
    relabeled = [(int(inv[i]), int(inv[j]), s) for i, j, s in edges]
    out = propagate(graph_from_edges(n, edges), E0, K)
    out_p = propagate(graph_from_edges(n, relabeled), E0[perm], K)
    assert np.allclose(out_p, out[perm], atol=1e-12)


def test_torch_path_keeps_gradients():
    g = graph_from_edges(3, [(0, 1, 1), (1, 2, -1)])
    E0 = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    propagate(g, E0, 2).sum().backward()
    assert E0.grad is not None and torch.isfinite(E0.grad).all()


def test_dump_json(tmp_path):
    g = graph_from_edges(3, [(0, 1, 1), (1, 2, -1)])
    g.dump(tmp_path / "g.json")
    import json

    data = json.loads((tmp_path / "g.json").read_text())
    assert data["edges"] == [[0, 1, 1], [1, 2, -1]] and data["degree"] == [1, 2, 1]
