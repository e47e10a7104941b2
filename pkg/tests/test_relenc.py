from __future__ import annotations

import numpy as np
import pytest

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError
from src.relenc import BiLstm, LstmCell


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_run(cell: LstmCell, xs):
    """Plain numpy LSTM pass with the same gate layout."""
    H = cell.H
    W_ih, W_hh, b = cell.W_ih.data, cell.W_hh.data, cell.bias.data
    h, c = np.zeros(H), np.zeros(H)
    out = []
    for x in xs:
        z = W_ih @ x + W_hh @ h + b
        i, f = sigmoid(z[:H]), sigmoid(z[H:2 * H])
        g, o = np.tanh(z[2 * H:3 * H]), sigmoid(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def test_cell_matches_numpy_reference(rng):
    cell = LstmCell(3, 4, rng)
    xs = [rng.normal(size=3) for _ in range(5)]
    got = cell.run([Tensor(x) for x in xs])
    for a, b in zip(got, reference_run(cell, xs)):
        assert np.allclose(a.data, b, atol=1e-12, rtol=0)


def test_zero_weights_give_zero_hidden_states(rng):
    lstm = BiLstm(4, 3, 2, 2, rng)
    for p in lstm.parameters().values():
        p.data[...] = 0.0
    hidden = lstm.bilstm_forward([Tensor(rng.normal(size=4)) for _ in range(3)])
    assert np.array_equal(hidden.data, np.zeros((3, 6)))


def test_single_element_sequence(rng):
    lstm = BiLstm(4, 3, 1, 5, rng)
    hidden = lstm.bilstm_forward([Tensor(rng.normal(size=4))])
    assert hidden.shape == (1, 6)
    r, beta, pooled = lstm.relation_representation(hidden)
    assert beta.data.tolist() == [1.0]
    assert np.allclose(pooled.data, hidden.data[0])
    assert r.shape == (5,)


def test_backward_direction_reads_the_sequence_reversed(rng):
    lstm = BiLstm(2, 3, 1, 2, rng)
    xs = [rng.normal(size=2) for _ in range(4)]
    hidden = lstm.bilstm_forward([Tensor(x) for x in xs]).data
    fwd = reference_run(lstm.forward_cells[0], xs)
    bwd = reference_run(lstm.backward_cells[0], xs[::-1])[::-1]
    assert np.allclose(hidden[:, :3], np.array(fwd), atol=1e-12, rtol=0)
    assert np.allclose(hidden[:, 3:], np.array(bwd), atol=1e-12, rtol=0)


def test_empty_sequence_is_rejected(rng):
    with pytest.raises(DimensionError):
        BiLstm(2, 3, 1, 2, rng).bilstm_forward([])


def test_uniform_attention_averages_states(rng):
    lstm = BiLstm(2, 1, 1, 2, rng)
    lstm.att_w.data[...] = 0.0
    _, beta, pooled = lstm.relation_representation(Tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert beta.data.tolist() == [0.5, 0.5]
    assert pooled.data.tolist() == [0.5, 0.5]


def test_identical_states_pool_to_themselves(rng):
    lstm = BiLstm(2, 2, 1, 2, rng)
    state = rng.normal(size=4)
    _, beta, pooled = lstm.relation_representation(Tensor(np.stack([state, state, state])))
    assert np.allclose(beta.data, 1.0 / 3.0)
    assert np.allclose(pooled.data, state)


def test_encode_feeds_support_last_to_first(rng):
    lstm = BiLstm(4, 3, 1, 4, rng)
    reps = rng.normal(size=(3, 4))
    direct = lstm.encode(Tensor(reps)).data
    hidden = lstm.bilstm_forward([Tensor(row) for row in reps[::-1]])
    manual, _, _ = lstm.relation_representation(hidden)
    assert np.allclose(direct, manual.data, atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_encoder_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    lstm = BiLstm(3, 2, 2, 2, rng)
    reps = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    weights = Tensor(rng.normal(size=2))
    params = {**lstm.parameters(), "reps": reps}
    assert dc.gradient_check(lambda: (lstm.encode(reps) * weights).sum(), params) < 1e-4
