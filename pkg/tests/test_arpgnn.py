from __future__ import annotations

import numpy as np
import pytest

from src import diffcore as dc
from src.arpgnn import ArpGnn, ArpGnnLayer, EdgeIndex, build_edge_index, triple_representation
from src.diffcore import Tensor
from src.exceptions import VocabularyError

BRANCHY = [("a", "r0", "b"), ("a", "r1", "c"), ("b", "r0", "c"), ("c", "r1", "d"), ("a", "r0", "d")]


def no_edges(n_entities: int) -> EdgeIndex:
    empty = np.zeros(0, dtype=np.int64)
    return EdgeIndex(empty, empty, empty, n_entities)


def oracle_layer(layer: ArpGnnLayer, kg, E: Tensor, R: Tensor) -> np.ndarray:
    """Entity-by-entity evaluation of one layer straight from the adjacency lists."""
    out = []
    with dc.no_grad():
        for v in range(kg.n_entities):
            e_v = dc.getitem(E, v)
            pre = dc.linear(dc.reshape(e_v, (1, layer.d_in)), layer.W_self, layer.bias).data[0]
            msgs = [layer.relation_message(e_v, dc.getitem(R, r), dc.getitem(E, u), r) for r, u in kg.adjacency[v]]
            if msgs:
                alpha = layer.attention_weights(e_v, msgs).data
                pre = pre + sum(a * m.data for a, m in zip(alpha, msgs))
            out.append(np.maximum(pre, 0.0))
    return np.array(out)


# ---- messages and attention --------------------------------------------

def test_zero_relation_weight_gives_zero_message(rng):
    layer = ArpGnnLayer(2, 3, 3, rng)
    layer.W_rel.data[...] = 0.0
    m = layer.relation_message(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)), 1)
    assert np.array_equal(m.data, np.zeros(3))


def test_selector_weight_returns_the_receiver(rng):
    layer = ArpGnnLayer(1, 3, 3, rng)
    layer.W_rel.data[0] = np.hstack([np.eye(3), np.zeros((3, 6))])
    e_v = rng.normal(size=3)
    m = layer.relation_message(Tensor(e_v), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)), 0)
    assert np.allclose(m.data, e_v)


def test_unknown_relation_index(rng):
    layer = ArpGnnLayer(2, 3, 3, rng)
    with pytest.raises(VocabularyError):
        layer.relation_message(Tensor(np.zeros(3)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), 5)


def test_attention_on_identical_messages_is_uniform(rng):
    layer = ArpGnnLayer(1, 2, 2, rng)
    m = Tensor(rng.normal(size=2))
    alpha = layer.attention_weights(Tensor(rng.normal(size=2)), [m, m, m, m]).data
    assert np.allclose(alpha, 0.25)


def test_attention_single_neighbor(rng):
    layer = ArpGnnLayer(1, 2, 2, rng)
    alpha = layer.attention_weights(Tensor(rng.normal(size=2)), [Tensor(rng.normal(size=2))]).data
    assert alpha.tolist() == [1.0]


def test_attention_hand_values(rng):
    layer = ArpGnnLayer(1, 1, 1, rng)
    layer.W_att.data[...] = [[0.0, 1.0]]
    alpha = layer.attention_weights(Tensor([0.0]), [Tensor([1.0]), Tensor([0.0])]).data
    e = np.e
    assert alpha == pytest.approx([e / (e + 1), 1 / (e + 1)])
    assert alpha[0] == pytest.approx(0.731, abs=5e-4)


# ---- layer forward -----------------------------------------------------

def test_isolated_entity_with_identity_self_path(rng):
    layer = ArpGnnLayer(1, 3, 3, rng)
    layer.W_self.data[...] = np.eye(3)
    E = Tensor(rng.uniform(0.0, 1.0, size=(2, 3)))
    out = layer(no_edges(2), E, Tensor(np.zeros((1, 3))))
    assert np.allclose(out.data, E.data)


def test_all_zero_inputs_and_parameters(make_kg, rng):
    kg = make_kg(BRANCHY)
    layer = ArpGnnLayer(kg.n_relations, 3, 3, rng)
    for p in layer.parameters().values():
        p.data[...] = 0.0
    out = layer(build_edge_index(kg), Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 3))))
    assert np.array_equal(out.data, np.zeros((4, 3)))


@pytest.mark.parametrize("rows", [
    [("a", "r0", "b"), ("b", "r1", "c")],
    BRANCHY,
])
def test_vectorized_layer_matches_entity_loop(make_kg, rows):
    kg = make_kg(rows)
    rng = np.random.default_rng(11)
    layer = ArpGnnLayer(kg.n_relations, 3, 3, rng)
    layer.bias.data[...] = rng.normal(0.0, 0.3, size=3)
    E = Tensor(rng.normal(size=(kg.n_entities, 3)))
    R = Tensor(rng.normal(size=(kg.n_relations, 3)))
    fast = layer(build_edge_index(kg), E, R).data
    assert np.allclose(fast, oracle_layer(layer, kg, E, R), atol=1e-10, rtol=0)


def test_edge_order_does_not_matter(make_kg, rng):
    kg = make_kg(BRANCHY)
    layer = ArpGnnLayer(kg.n_relations, 3, 3, rng)
    E = Tensor(rng.normal(size=(4, 3)))
    R = Tensor(rng.normal(size=(2, 3)))
    edges = build_edge_index(kg)
    perm = rng.permutation(len(edges))
    shuffled = EdgeIndex(edges.src[perm], edges.rel[perm], edges.dst[perm], edges.n_entities)
    assert np.allclose(layer(edges, E, R).data, layer(shuffled, E, R).data, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients(make_kg, seed):
    kg = make_kg(BRANCHY)
    rng = np.random.default_rng(seed)
    layer = ArpGnnLayer(kg.n_relations, 2, 2, rng)
    layer.bias.data[...] = rng.normal(0.0, 0.5, size=2)
    E = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    R = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    weights = Tensor(rng.normal(size=(4, 2)))
    edges = build_edge_index(kg)
    params = {**layer.parameters(), "E": E, "R": R}
    assert dc.gradient_check(lambda: (layer(edges, E, R) * weights).sum(), params) < 1e-4


def test_fresh_layer_passes_isolated_nonnegative_entities_through(rng):
    layer = ArpGnnLayer(2, 3, 3, rng)
    E = Tensor(rng.uniform(0.0, 1.0, size=(4, 3)))
    out = layer(no_edges(4), E, Tensor(rng.normal(size=(2, 3))))
    assert np.allclose(out.data, E.data, atol=1e-14, rtol=0)


# ---- stack -------------------------------------------------------------

def test_zero_layers_is_identity(make_kg, rng):
    kg = make_kg(BRANCHY)
    E = Tensor(rng.normal(size=(4, 3)))
    out = ArpGnn(kg.n_relations, 3, 0, rng).encode_entities(build_edge_index(kg), E, Tensor(np.zeros((2, 3))))
    assert np.array_equal(out.data, E.data)


def test_two_layers_reach_two_hops(make_kg, rng):
    kg = make_kg([("a", "r", "b"), ("b", "r", "c")])
    gnn = ArpGnn(1, 4, 2, rng)
    # nonnegative weights and inputs keep every ReLU in its linear region
    for layer in gnn.layers:
        layer.W_self.data[...] = np.eye(4)
        layer.W_rel.data[...] = np.abs(layer.W_rel.data)
    E0 = rng.uniform(0.0, 1.0, size=(3, 4))
    R = Tensor(rng.uniform(0.0, 1.0, size=(1, 4)))
    edges = build_edge_index(kg)
    base = gnn(edges, Tensor(E0), R).data
    moved = E0.copy()
    moved[kg.entity_index("c")] += 0.5
    after = gnn(edges, Tensor(moved), R).data
    a = kg.entity_index("a")
    assert not np.allclose(base[a], after[a])

    one_layer = ArpGnn(1, 4, 1, np.random.default_rng(0))
    assert np.allclose(one_layer(edges, Tensor(E0), R).data[a], one_layer(edges, Tensor(moved), R).data[a],
                       atol=1e-14, rtol=0)


# ---- edges and triple representations ----------------------------------

def test_neighbor_cap_subsamples(make_kg, rng):
    kg = make_kg([("hub", "r", f"n{i}") for i in range(10)])
    edges = build_edge_index(kg, neighbor_cap=4, rng=rng)
    assert edges.degree()[kg.entity_index("hub")] == 4
    assert len(edges) == 4


def test_neighbor_cap_needs_a_stream(make_kg):
    kg = make_kg([("hub", "r", f"n{i}") for i in range(3)])
    with pytest.raises(ValueError):
        build_edge_index(kg, neighbor_cap=2)


def test_triple_representation():
    reps = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert triple_representation(reps, 0, 1).data.tolist() == [1.0, 2.0, 3.0, 4.0]
    both = triple_representation(reps, np.array([1, 0]), np.array([1, 0])).data
    assert np.array_equal(both[:, :2], both[:, 2:])
