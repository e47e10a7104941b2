"""
NP-FKGC - Model Assembly
Graph encoder, relation encoder, neural-process encoder, flow chain and decoder wired together.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src import diffcore as dc
from src.arpgnn import ArpGnn, EdgeIndex, triple_representation
from src.config import TrainConfig
from src.decoder import SManifoldDecoder
from src.diffcore import Tensor
from src.exceptions import ConfigConflictError
from src.kgdata import EmbeddingTable, FewShotTask
from src.nn import Module
from src.npflow import FlowChain, LatentState, NpEncoder, context_inputs, transform
from src.relenc import BiLstm

logger = logging.getLogger(__name__)


class NPFKGCModel(Module):
    """
    Few-shot completion model over one knowledge graph.

    Ablations come from the config: use_gnn=False keeps the initial embeddings,
    T=0 removes the flow, decoder='transe' drops the latent-conditioned manifold and
    use_np=False replaces the stochastic latent with a fixed zero code.
    """

    def __init__(self, config: TrainConfig, n_entities: int, n_relations: int, edges: EdgeIndex,
                 rng: np.random.Generator, embeddings: Optional[EmbeddingTable] = None):
        """
        Initialize the model.

        Args:
            config: Hyperparameters
            n_entities: Entity vocabulary size
            n_relations: Relation vocabulary size
            edges: Background-graph neighbor edges
            rng: Initialization stream
            embeddings: Pretrained e0 (uniform TransE-style init otherwise)
        """
        super().__init__()
        self.config = config
        self.edges = edges
        d, d_z = config.d, config.d_z

        if embeddings is None:
            bound = 6.0 / np.sqrt(d)
            embeddings = EmbeddingTable(rng.uniform(-bound, bound, size=(n_entities, d)),
                                        rng.uniform(-bound, bound, size=(n_relations, d)))
        if embeddings.d != d:
            raise ConfigConflictError(f"embedding width {embeddings.d} does not match d={d}")
        if embeddings.entity.shape[0] != n_entities or embeddings.relation.shape[0] != n_relations:
            raise ConfigConflictError("embedding rows do not match the graph vocabularies")

        self.entity_emb = Tensor(embeddings.entity.copy(), requires_grad=True)
        self.relation_emb = Tensor(embeddings.relation.copy(), requires_grad=True)
        if config.freeze_embeddings:
            self.entity_emb.requires_grad = False
            self.relation_emb.requires_grad = False

        self.gnn = ArpGnn(n_relations, d, config.L if config.use_gnn else 0, rng)
        self.relation_encoder = BiLstm(2 * d, config.H, config.lstm_layers, d, rng)
        self.np_encoder: Optional[NpEncoder] = None
        self.flow: Optional[FlowChain] = None
        if config.use_np:
            self.np_encoder = NpEncoder(d, d_z, rng)
            self.flow = FlowChain(config.flow, config.T, d_z, rng)
        self.decoder = SManifoldDecoder(d, d_z, rng, variant=config.decoder)

        logger.debug("NP-FKGC model with %d parameters", self.num_parameters())

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        groups: Dict[str, Dict[str, Tensor]] = {}
        for name, p in self.trainable_parameters().items():
            groups.setdefault(name.split(".")[0], {})[name] = p
        return groups

    # ---- encoding --------------------------------------------------------
    def encode_entities(self) -> Tensor:
        """Path-aware representations for every entity, shape (|E|, d)."""
        return self.gnn.encode_entities(self.edges, self.entity_emb, self.relation_emb)

    def encode_task(self, task: FewShotTask, entity_reps: Tensor) -> Tensor:
        """r' from the support positives."""
        support = np.array(task.support, dtype=np.int64).reshape(-1, 2)
        return self.relation_encoder.encode(triple_representation(entity_reps, support[:, 0], support[:, 1]))

    def context_rows(self, task: FewShotTask, entity_reps: Tensor, with_targets: bool = False) -> Tensor:
        heads, tails, labels = task.context_arrays()
        rows = context_inputs(entity_reps, heads, tails, labels)
        if with_targets:
            th, tt, tl = task.target_arrays()
            rows = dc.concat([rows, context_inputs(entity_reps, th, tt, tl)], axis=0)
        return rows

    def prior(self, task: FewShotTask, entity_reps: Tensor) -> Tuple[Tensor, Tensor]:
        """Base Gaussian conditioned on the context set only."""
        if self.np_encoder is None:
            raise ConfigConflictError("model was built with use_np=False and has no prior")
        return self.np_encoder(self.context_rows(task, entity_reps))

    def predict_latent(self, task: FewShotTask, entity_reps: Tensor, rng: Optional[np.random.Generator] = None,
                       sample: bool = False) -> LatentState:
        """
        z_T for prediction: the flowed base mean, or a fresh draw when `sample` is set.
        """
        if self.np_encoder is None:
            return self.fixed_latent()
        mu, sigma = self.prior(task, entity_reps)
        eps = None if sample else np.zeros((1, self.config.d_z))
        return transform(self.flow, mu, sigma, rng, 1, eps)

    def fixed_latent(self, n_samples: int = 1) -> LatentState:
        """Zero code with no density terms, for the model without a neural process."""
        d_z = self.config.d_z
        zeros = Tensor(np.zeros((n_samples, d_z)))
        origin = Tensor(np.zeros(d_z))
        return LatentState(origin, origin, zeros, zeros, [], Tensor(np.zeros(n_samples)))

    # ---- scoring ---------------------------------------------------------
    def score_pairs(self, entity_reps: Tensor, heads: Sequence[int], tails: Sequence[int], r_prime: Tensor,
                    z_T: Tensor) -> Tensor:
        return self.decoder.score(dc.take(entity_reps, heads), r_prime, dc.take(entity_reps, tails), z_T)
