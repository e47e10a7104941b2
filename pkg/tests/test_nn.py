from __future__ import annotations

import numpy as np
import pytest

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import CheckpointError, DimensionError
from src.nn import MLP, Linear, Module, xavier_uniform


class TwoLayer(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = Linear(3, 4, rng)
        self.scale = Tensor(np.ones(1), requires_grad=True)
        self.second = Linear(4, 2, rng, bias=False)
        self.constant = Tensor(np.zeros(2))


def test_parameters_are_named_in_assignment_order(rng):
    model = TwoLayer(rng)
    assert list(model.parameters()) == ["scale", "first.weight", "first.bias", "second.weight"]
    assert model.num_parameters() == 1 + 12 + 4 + 8


def test_trainable_parameters_skip_frozen_tensors(rng):
    model = TwoLayer(rng)
    model.scale.requires_grad = False
    assert "scale" not in model.trainable_parameters()
    assert "scale" in model.state_dict()


def test_state_dict_round_trip(rng):
    a, b = TwoLayer(rng), TwoLayer(np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for name, p in a.parameters().items():
        assert np.array_equal(p.data, b.parameters()[name].data)


def test_load_state_dict_errors(rng):
    model = TwoLayer(rng)
    state = model.state_dict()
    del state["scale"]
    with pytest.raises(CheckpointError, match="scale"):
        model.load_state_dict(state)
    state = model.state_dict()
    state["first.weight"] = np.zeros((5, 3))
    with pytest.raises(DimensionError):
        model.load_state_dict(state)


def test_linear_accepts_vectors_and_matrices(rng):
    layer = Linear(3, 2, rng)
    x = np.array([1.0, -1.0, 0.5])
    single = layer(Tensor(x)).data
    batch = layer(Tensor(np.stack([x, x]))).data
    assert single.shape == (2,)
    assert np.allclose(batch[0], single)
    assert np.allclose(single, layer.weight.data @ x)


def test_xavier_bound(rng):
    w = xavier_uniform(rng, 10, 30)
    assert np.abs(w).max() <= np.sqrt(6.0 / 40)


def test_mlp_zero_output_gives_zero(rng):
    mlp = MLP([3, 5, 2], rng, activation="tanh")
    mlp.zero_output()
    assert np.array_equal(mlp(Tensor(rng.normal(size=(4, 3)))).data, np.zeros((4, 2)))


def test_mlp_gradients(rng):
    mlp = MLP([3, 4, 2], rng, activation="tanh")
    x = Tensor(rng.normal(size=(5, 3)))
    assert dc.gradient_check(lambda: dc.square(mlp(x)).sum(), mlp.parameters()) < 1e-4


def test_mlp_needs_two_sizes(rng):
    with pytest.raises(DimensionError):
        MLP([3], rng)
