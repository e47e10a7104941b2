"""
NP-FKGC - Neural Building Blocks
Named-parameter containers, affine layers and small MLPs on top of diffcore.
"""

import logging
from typing import Callable, Dict, Iterator, List, Sequence

import numpy as np

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import CheckpointError, DimensionError

logger = logging.getLogger(__name__)

Activation = Callable[[Tensor], Tensor]

ACTIVATIONS: Dict[str, Activation] = {
    "relu": dc.relu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "leaky_relu": dc.leaky_relu,
}


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Module:
    """
    Base class for anything holding trainable tensors.

    Tensor attributes flagged `requires_grad` and child Modules are registered
    on assignment, in assignment order, so parameter names are stable.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into existing parameters; every name must be present with matching shape."""
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(f"missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Linear(Module):
    """
    Affine layer y = x·Wᵀ + b with Xavier-uniform weights and zero bias.

    Args:
        in_features: Input width
        out_features: Output width
        rng: Generator used for initialization
        bias: Whether to learn an additive bias
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(xavier_uniform(rng, out_features, in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = dc.reshape(x, (1, x.shape[0]))
        out = dc.linear(x, self.weight, self.bias)
        return dc.reshape(out, (self.out_features,)) if squeeze else out


class MLP(Module):
    """
    Stack of Linear layers with an activation between them (none after the last).

    Args:
        sizes: Layer widths, input first, e.g. [in, hidden, out]
        rng: Generator used for initialization
        activation: Name of the hidden activation
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu"):
        super().__init__()
        if len(sizes) < 2:
            raise DimensionError(f"MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = list(sizes)
        self.activation = ACTIVATIONS[activation]
        self.layers = ModuleList([Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])])

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = self.activation(x)
        return x

    @property
    def output_layer(self) -> Linear:
        return self.layers[len(self.layers) - 1]

    def zero_output(self) -> None:
        """Zero the final layer so the MLP outputs exactly 0."""
        out = self.output_layer
        out.weight.data[...] = 0.0
        if out.bias is not None:
            out.bias.data[...] = 0.0
