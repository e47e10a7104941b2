"""
NP-FKGC - Stochastic ManifoldE Decoder
Scores (head, tail) pairs against a latent-conditioned sphere around the translation h' + r'.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError, InsufficientDataError
from src.nn import MLP, Module

logger = logging.getLogger(__name__)

VARIANTS = ("smanifolde", "transe")


def manifold_fn(h: Tensor, r: Tensor, t: Tensor) -> Tensor:
    """
    ‖h + r − t‖² along the last axis.

    Vectors give a scalar; (n, d) matrices give one value per row.
    """
    if not (h.shape == r.shape == t.shape):
        raise DimensionError(f"manifold inputs disagree: {h.shape}, {r.shape}, {t.shape}")
    sq = dc.square(h + r - t)
    return sq.sum() if h.ndim == 1 else sq.sum(axis=h.ndim - 1)


class SManifoldDecoder(Module):
    """
    Latent-conditioned ManifoldE scoring.

    Args:
        d: Entity width
        d_z: Latent width
        rng: Initialization stream
        variant: 'smanifolde' (latent offsets and radius) or 'transe' (plain translation distance)
    """

    def __init__(self, d: int, d_z: int, rng: np.random.Generator, variant: str = "smanifolde"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"Unknown decoder variant: {variant}")
        self.d = d
        self.d_z = d_z
        self.variant = variant
        self.head_mlp = MLP([d_z, d_z, d], rng)
        self.tail_mlp = MLP([d_z, d_z, d], rng)
        self.radius_mlp = MLP([d_z, d_z, 1], rng)

    def project_latent(self, z_T: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """(z_head (d,), z_tail (d,), D_z (1,)) from one latent vector."""
        if z_T.shape != (self.d_z,):
            raise DimensionError(f"latent must have shape ({self.d_z},), got {z_T.shape}")
        return self.head_mlp(z_T), self.tail_mlp(z_T), self.radius_mlp(z_T)

    def score(self, heads: Tensor, r_prime: Tensor, tails: Tensor, z_T: Tensor) -> Tensor:
        """
        (‖h' + r' − t'‖² − D_z²)² per row, with h' = h + z_head and t' = t + z_tail.

        Args:
            heads: (n, d) encoded heads, or a single (d,) vector
            r_prime: (d,) relation vector
            tails: same shape as heads
            z_T: (d_z,) latent

        Returns:
            (n,) scores, or a (1,)-shaped score for vector inputs; lower is better
        """
        single = heads.ndim == 1
        if single:
            heads = dc.reshape(heads, (1, self.d))
            tails = dc.reshape(tails, (1, self.d))
        if heads.shape != tails.shape or heads.shape[1:] != (self.d,):
            raise DimensionError(f"score inputs disagree: {heads.shape} vs {tails.shape}")
        n = heads.shape[0]
        rel = dc.expand(dc.reshape(r_prime, (1, self.d)), (n, self.d))
        if self.variant == "transe":
            return manifold_fn(heads, rel, tails)

        z_head, z_tail, radius = self.project_latent(z_T)
        h = heads + dc.expand(dc.reshape(z_head, (1, self.d)), (n, self.d))
        t = tails + dc.expand(dc.reshape(z_tail, (1, self.d)), (n, self.d))
        return dc.square(manifold_fn(h, rel, t) - dc.square(radius))

    def rank_candidates(self, head: Tensor, r_prime: Tensor, z_T: Tensor, candidates: Sequence[int],
                        entity_reps: Tensor) -> List[Tuple[int, float]]:
        """
        Candidates ordered by ascending score, ties by entity index.
        """
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.size == 0:
            raise InsufficientDataError("no candidate tails to rank")
        with dc.no_grad():
            n = len(candidates)
            heads = dc.expand(dc.reshape(head, (1, self.d)), (n, self.d))
            scores = self.score(heads, r_prime, dc.take(entity_reps, candidates), z_T).data
        order = np.lexsort((candidates, scores))
        return [(int(candidates[i]), float(scores[i])) for i in order]
