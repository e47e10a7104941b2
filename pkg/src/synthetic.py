"""
NP-FKGC - Synthetic Compositional Graphs
Seeded generator for desk-scale data: entities on a grid, background relations that step
across it, and few-shot relations defined as two-hop compositions of those steps.
"""

import logging
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.config import SynthSettings
from src.exceptions import InsufficientDataError
from src.kgdata import (KnowledgeGraph, TaskSplit, background_graph, pretrain_transe, save_embeddings, save_split,
                        save_triples)
from src.utils import rng_stream

logger = logging.getLogger(__name__)

# head -> tails of one relation
RelationMap = Dict[int, List[int]]


class EntityLattice:
    """
    Entities placed at random on the cells of a near-square grid.
    """

    def __init__(self, n_entities: int, rng: np.random.Generator):
        self.width = int(np.ceil(np.sqrt(n_entities)))
        cells = rng.permutation(n_entities)
        self.positions = np.stack([cells // self.width, cells % self.width], axis=1)
        self._occupant = {(int(r), int(c)): e for e, (r, c) in enumerate(self.positions)}

    def shifted(self, entity: int, step: np.ndarray) -> Optional[int]:
        """The entity `step` cells away, or None off the grid."""
        r, c = self.positions[entity] + step
        return self._occupant.get((int(r), int(c)))

    def relation(self, steps: List[np.ndarray]) -> RelationMap:
        """Heads whose every stepped cell is occupied, mapped to those occupants."""
        out: RelationMap = {}
        for h in range(len(self.positions)):
            tails = [self.shifted(h, s) for s in steps]
            if all(t is not None for t in tails):
                out[h] = tails
        return out


def shift_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    """
    n distinct grid steps, no two of which cancel.

    Steps are drawn ring by ring from one half-plane and then given random signs, so
    s_p + s_q is never zero and no composition is a self-loop.
    """
    chosen: List[Tuple[int, int]] = []
    radius = 0
    while len(chosen) < n:
        radius += 1
        ring = [(dr, dc) for dr in range(0, radius + 1) for dc in range(-radius, radius + 1)
                if max(abs(dr), abs(dc)) == radius and (dr > 0 or dc > 0)]
        ring = [ring[i] for i in rng.permutation(len(ring))]
        chosen.extend(ring[: n - len(chosen)])
    signs = rng.choice(np.array([-1, 1]), size=n)
    return np.array(chosen, dtype=np.int64) * signs[:, None]


def compose(first: RelationMap, second: RelationMap) -> RelationMap:
    """q after p; a head survives only if every intermediate has a functional q-tail."""
    out: RelationMap = {}
    for h, mids in first.items():
        tails = [second[m][0] for m in mids if m in second]
        if len(tails) == len(mids):
            out[h] = tails
    return out


def _check_feasible(s: SynthSettings) -> None:
    problems = []
    if s.heads_per_relation > s.n_entities:
        problems.append(f"heads_per_relation={s.heads_per_relation} exceeds n_entities={s.n_entities}")
    if s.arity >= s.n_entities:
        problems.append(f"arity={s.arity} needs more than {s.arity} entities")
    if problems:
        raise InsufficientDataError("infeasible synthetic graph: " + "; ".join(problems))


def generate_compositional_kg(settings: SynthSettings, seed: int = 42) -> Tuple[KnowledgeGraph, TaskSplit]:
    """
    Build a graph whose few-shot relations are r(h) = q(p(h)) over background relations.

    Background relations 'bg*' move one fixed step on the grid, so every relation is a
    translation and compositions add steps. When one-to-many relations are requested,
    'bgm*' variants map a head to `arity` collinear cells past its 'bg' tail, and that share
    of few-shot relations composes through them.

    Args:
        settings: Sizes and arity
        seed: Run seed; the 'synth' stream is derived from it

    Returns:
        (graph, split) with train/valid/test holding the few-shot relations
    """
    _check_feasible(settings)
    rng = rng_stream(seed, "synth")
    N = settings.n_entities
    lattice = EntityLattice(N, rng)
    entities = {f"e{i}": i for i in range(N)}
    relations: Dict[str, int] = {}
    rows: List[Tuple[int, int, int]] = []

    def emit(name: str, rel: RelationMap, heads: Optional[List[int]] = None) -> int:
        rid = relations.setdefault(name, len(relations))
        for h in (sorted(rel) if heads is None else heads):
            rows.extend((h, rid, t) for t in rel[h])
        return rid

    steps = shift_vectors(settings.n_background, rng)
    single = [lattice.relation([s]) for s in steps]
    for b, rel in enumerate(single):
        emit(f"bg{b}", rel)

    fraction = settings.many_fraction
    wants_many = settings.arity > 1 and fraction > 0
    multi: List[RelationMap] = []
    if wants_many:
        for b, s in enumerate(steps):
            along = np.array([0, 1]) if rng.integers(2) else np.array([1, 0])
            rel = lattice.relation([s + k * along for k in range(settings.arity)])
            multi.append(rel)
            emit(f"bgm{b}", rel)

    pairs = list(product(range(settings.n_background), repeat=2))
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    needed = settings.heads_per_relation
    usable: Dict[bool, List[Tuple[int, int, RelationMap]]] = {False: [], True: []}
    for p, q in pairs:
        candidates = {False: compose(single[p], single[q])}
        if wants_many:
            candidates[True] = compose(multi[p], single[q])
        for many, rel in candidates.items():
            if len(rel) >= needed:
                usable[many].append((p, q, rel))

    sizes = {"train": settings.n_train, "valid": settings.n_valid, "test": settings.n_test}
    split_rel: Dict[str, List[int]] = {key: [] for key in sizes}
    used = {False: 0, True: 0}
    counter = 0
    for key, count in sizes.items():
        n_many = int(round(fraction * count)) if wants_many else 0
        for j in range(count):
            many = j < n_many
            if not usable[many]:
                raise InsufficientDataError(
                    f"infeasible synthetic graph: no {'one-to-many ' if many else ''}composition on a "
                    f"{lattice.width}-wide grid has {needed} heads")
            p, q, rel = usable[many][used[many] % len(usable[many])]
            used[many] += 1
            heads = rng.choice(np.array(sorted(rel)), size=needed, replace=False)
            split_rel[key].append(emit(f"fs{counter}", rel, heads.tolist()))
            counter += 1

    kg = KnowledgeGraph(entities, relations, np.array(rows, dtype=np.int64))
    split = TaskSplit(split_rel["train"], split_rel["valid"], split_rel["test"])
    logger.info("Synthetic graph: %d entities, %d relations, %d triples", kg.n_entities, kg.n_relations,
                len(kg.triples))
    return kg, split


def write_dataset(settings: SynthSettings, out_dir: Union[str, Path], seed: int = 42) -> Dict[str, Path]:
    """
    Generate a graph, pretrain TransE embeddings on its background part and write all three files.

    Entity embeddings are shifted into the positive orthant before writing, so the graph
    encoder's ReLU starts in its linear region.

    Returns:
        Paths keyed 'triples', 'split', 'embeddings'
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kg, split = generate_compositional_kg(settings, seed)
    table = pretrain_transe(background_graph(kg, split), settings.embedding_dim, settings.pretrain_epochs,
                            margin=1.0, lr=settings.pretrain_lr, rng=rng_stream(seed, "init")).nonnegative()
    paths = {
        "triples": out_dir / "triples.tsv",
        "split": out_dir / "split.json",
        "embeddings": out_dir / "embeddings.txt",
    }
    save_triples(kg, paths["triples"])
    save_split(split, kg, paths["split"])
    save_embeddings(table, kg, paths["embeddings"])
    return paths
