"""
NP-FKGC - Attentive Relation Path GNN
Relation-aware message passing that turns initial embeddings into path-aware entity representations.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError, VocabularyError
from src.kgdata import KnowledgeGraph
from src.nn import Module, ModuleList, xavier_uniform

logger = logging.getLogger(__name__)

# Initial message transforms are scaled down so a fresh layer stays close to its self path
MESSAGE_INIT_SCALE = 0.1


@dataclass(eq=False)
class EdgeIndex:
    """
    Flattened neighbor edges (v, r, u): entity v receives a message from neighbor u over relation r.
    """
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    n_entities: int

    def __len__(self) -> int:
        return len(self.src)

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_entities)


def build_edge_index(kg: KnowledgeGraph, neighbor_cap: int = 64,
                     rng: Union[np.random.Generator, None] = None) -> EdgeIndex:
    """
    Collect adjacency into edge arrays, subsampling any entity with more than `neighbor_cap` neighbors.

    Args:
        kg: Background graph
        neighbor_cap: Maximum messages per entity
        rng: Stream for the subsample (required only when some entity exceeds the cap)
    """
    src, rel, dst = [], [], []
    capped = 0
    for v, neighbors in enumerate(kg.adjacency):
        if len(neighbors) > neighbor_cap:
            if rng is None:
                raise ValueError("neighbor cap exceeded but no rng stream given")
            keep = np.sort(rng.choice(len(neighbors), size=neighbor_cap, replace=False))
            neighbors = [neighbors[i] for i in keep]
            capped += 1
        for r, u in neighbors:
            src.append(v)
            rel.append(r)
            dst.append(u)
    if capped:
        logger.warning("Neighbor cap %d subsampled %d entities", neighbor_cap, capped)
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return EdgeIndex(as_int(src), as_int(rel), as_int(dst), kg.n_entities)


class ArpGnnLayer(Module):
    """
    One attentive message-passing layer.

    Args:
        n_relations: Vocabulary size; one message transform per relation
        d_in: Input representation width
        d_out: Output representation width
        rng: Initialization stream
    """

    def __init__(self, n_relations: int, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_relations = n_relations
        self.d_in = d_in
        self.d_out = d_out
        W_rel = np.stack([xavier_uniform(rng, d_out, 3 * d_in) for _ in range(n_relations)])
        self.W_rel = Tensor(MESSAGE_INIT_SCALE * W_rel, requires_grad=True)
        # square layers start from the identity self path
        W_self = np.eye(d_out) if d_in == d_out else xavier_uniform(rng, d_out, d_in)
        self.W_self = Tensor(W_self, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        self.W_att = Tensor(xavier_uniform(rng, 1, d_in + d_out), requires_grad=True)

    def _relation_weight(self, relation: int) -> Tensor:
        if not 0 <= relation < self.n_relations:
            raise VocabularyError(f"unknown relation index {relation} (layer has {self.n_relations})")
        return dc.getitem(self.W_rel, int(relation))

    def relation_message(self, e_v: Tensor, e_r: Tensor, e_u: Tensor, relation: int) -> Tensor:
        """W_r · (e_v ‖ e_r ‖ e_u) for a single neighbor edge."""
        x = dc.concat([e_v, e_r, e_u])
        if x.shape != (3 * self.d_in,):
            raise DimensionError(f"message inputs must each have width {self.d_in}")
        m = dc.matmul(self._relation_weight(relation), dc.reshape(x, (3 * self.d_in, 1)))
        return dc.reshape(m, (self.d_out,))

    def attention_weights(self, e_v: Tensor, messages: Sequence[Tensor]) -> Tensor:
        """Softmax over LeakyReLU(W_att · (e_v ‖ m_i)) for the messages reaching one entity."""
        if not messages:
            raise DimensionError("attention needs at least one message")
        n = len(messages)
        rows = dc.concat([dc.expand(dc.reshape(e_v, (1, self.d_in)), (n, self.d_in)),
                          dc.stack(messages)], axis=1)
        scores = dc.leaky_relu(dc.linear(rows, self.W_att))
        return dc.softmax(dc.reshape(scores, (n,)))

    def messages(self, edges: EdgeIndex, entity_reps: Tensor, relation_reps: Tensor):
        """
        All edge messages, grouped by relation.

        Returns:
            (messages (n_edges, d_out), receiving entity per row)
        """
        blocks, receivers = [], []
        for r in np.unique(edges.rel):
            idx = np.flatnonzero(edges.rel == r)
            x = dc.concat([dc.take(entity_reps, edges.src[idx]),
                           dc.take(relation_reps, np.full(len(idx), r)),
                           dc.take(entity_reps, edges.dst[idx])], axis=1)
            blocks.append(dc.linear(x, self._relation_weight(int(r))))
            receivers.append(edges.src[idx])
        return dc.concat(blocks, axis=0), np.concatenate(receivers)

    def forward(self, edges: EdgeIndex, entity_reps: Tensor, relation_reps: Tensor) -> Tensor:
        """
        e_v' = ReLU(W e_v + Σ_i a_i m_i + B) for every entity at once.
        """
        n_ent = entity_reps.shape[0]
        self_path = dc.linear(entity_reps, self.W_self, self.bias)
        if len(edges) == 0:
            return dc.relu(self_path)

        msgs, receivers = self.messages(edges, entity_reps, relation_reps)
        n_edges = len(receivers)
        rows = dc.concat([dc.take(entity_reps, receivers), msgs], axis=1)
        scores = dc.reshape(dc.leaky_relu(dc.linear(rows, self.W_att)), (n_edges,))

        # per-receiver softmax; the shift is a constant
        seg_max = np.full(n_ent, -np.inf)
        np.maximum.at(seg_max, receivers, scores.data)
        expd = dc.exp(scores - Tensor(seg_max[receivers]))
        denom = dc.segment_sum(expd, receivers, n_ent)
        alpha = expd / dc.take(denom, receivers)

        weighted = msgs * dc.expand(dc.reshape(alpha, (n_edges, 1)), (n_edges, self.d_out))
        aggregate = dc.segment_sum(weighted, receivers, n_ent)
        return dc.relu(self_path + aggregate)

    __call__ = forward


class ArpGnn(Module):
    """Stack of L layers; relation representations stay at their initial values."""

    def __init__(self, n_relations: int, d: int, L: int, rng: np.random.Generator):
        super().__init__()
        self.L = L
        self.layers = ModuleList([ArpGnnLayer(n_relations, d, d, rng) for _ in range(L)])

    def encode_entities(self, edges: EdgeIndex, entity_emb: Tensor, relation_emb: Tensor) -> Tensor:
        reps = entity_emb
        for layer in self.layers:
            reps = layer(edges, reps, relation_emb)
        return reps

    __call__ = encode_entities


def triple_representation(entity_reps: Tensor, heads, tails) -> Tensor:
    """
    s = h' ‖ t'. Scalar indices give a (2d,) vector, index arrays a (n, 2d) matrix.
    """
    if np.ndim(heads) == 0:
        return dc.concat([dc.getitem(entity_reps, int(heads)), dc.getitem(entity_reps, int(tails))])
    return dc.concat([dc.take(entity_reps, heads), dc.take(entity_reps, tails)], axis=1)
