"""
NP-FKGC - Relation Encoder
Attentive Bi-LSTM over support-triple representations producing the relation vector r'.
"""

import logging
from typing import List, Tuple

import numpy as np

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError
from src.nn import Linear, Module, ModuleList

logger = logging.getLogger(__name__)


class LstmCell(Module):
    """Single-direction LSTM cell; gate blocks ordered input, forget, cell, output."""

    def __init__(self, d_in: int, H: int, rng: np.random.Generator):
        super().__init__()
        self.d_in = d_in
        self.H = H
        bound = 1.0 / np.sqrt(H)
        self.W_ih = Tensor(rng.uniform(-bound, bound, size=(4 * H, d_in)), requires_grad=True)
        self.W_hh = Tensor(rng.uniform(-bound, bound, size=(4 * H, H)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=4 * H), requires_grad=True)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        H = self.H
        gates = dc.linear(dc.reshape(x, (1, self.d_in)), self.W_ih, self.bias) \
            + dc.linear(dc.reshape(h, (1, H)), self.W_hh)
        gates = dc.reshape(gates, (4 * H,))
        i = dc.sigmoid(gates[0:H])
        f = dc.sigmoid(gates[H:2 * H])
        g = dc.tanh(gates[2 * H:3 * H])
        o = dc.sigmoid(gates[3 * H:4 * H])
        c = f * c + i * g
        h = o * dc.tanh(c)
        return h, c

    def run(self, sequence: List[Tensor]) -> List[Tensor]:
        h = Tensor(np.zeros(self.H))
        c = Tensor(np.zeros(self.H))
        out = []
        for x in sequence:
            h, c = self.step(x, h, c)
            out.append(h)
        return out


class BiLstm(Module):
    """
    Stacked bidirectional LSTM with scalar-logit attention pooling and a projection to width d.

    Args:
        d_in: Width of each input element (2d for triple representations)
        H: Hidden size per direction
        layers: Number of stacked bidirectional layers
        d_out: Width of the produced relation vector
        rng: Initialization stream
    """

    def __init__(self, d_in: int, H: int, layers: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        if H < 1 or layers < 1:
            raise DimensionError("Bi-LSTM needs H >= 1 and at least one layer")
        self.d_in = d_in
        self.H = H
        self.forward_cells = ModuleList()
        self.backward_cells = ModuleList()
        for k in range(layers):
            width = d_in if k == 0 else 2 * H
            self.forward_cells.append(LstmCell(width, H, rng))
            self.backward_cells.append(LstmCell(width, H, rng))
        bound = 1.0 / np.sqrt(2 * H)
        self.att_w = Tensor(rng.uniform(-bound, bound, size=(1, 2 * H)), requires_grad=True)
        self.att_b = Tensor(np.zeros(1), requires_grad=True)
        self.projection = Linear(2 * H, d_out, rng)

    def bilstm_forward(self, sequence: List[Tensor]) -> Tensor:
        """
        Hidden states for a sequence, as a (len, 2H) tensor of forward ‖ backward states.
        """
        if not sequence:
            raise DimensionError("Bi-LSTM needs a nonempty sequence")
        xs = list(sequence)
        for fwd, bwd in zip(self.forward_cells, self.backward_cells):
            hf = fwd.run(xs)
            hb = bwd.run(xs[::-1])[::-1]
            xs = [dc.concat([a, b]) for a, b in zip(hf, hb)]
        return dc.stack(xs)

    def relation_representation(self, hidden: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Attention-pooled relation vector.

        Args:
            hidden: (K, 2H) hidden states

        Returns:
            (r' of width d_out, attention weights β (K,), pooled state before projection (2H,))
        """
        K = hidden.shape[0]
        if K < 1:
            raise DimensionError("relation representation needs at least one hidden state")
        logits = dc.tanh(dc.linear(hidden, self.att_w, self.att_b))
        beta = dc.softmax(dc.reshape(logits, (K,)))
        weights = dc.expand(dc.reshape(beta, (K, 1)), hidden.shape)
        pooled = (hidden * weights).sum(axis=0)
        return self.projection(pooled), beta, pooled

    def encode(self, support_reps: Tensor) -> Tensor:
        """
        r' from the (K, 2d) support triple representations, fed last-to-first.
        """
        K = support_reps.shape[0]
        sequence = [support_reps[i] for i in range(K - 1, -1, -1)]
        r_prime, _, _ = self.relation_representation(self.bilstm_forward(sequence))
        return r_prime

    __call__ = encode
