"""
NP-FKGC - Knowledge Graph Data
Triple stores, few-shot episode construction, relation categories and embedding tables.
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError, InsufficientDataError, ParseError, VocabularyError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ONE_TO_MANY_THRESHOLD = 1.5


class RelationCategory(str, Enum):
    ONE_TO_ONE = "one_to_one"
    ONE_TO_MANY = "one_to_many"


# =============================================================================
# KNOWLEDGE GRAPH
# =============================================================================

@dataclass(eq=False)
class KnowledgeGraph:
    """
    Vocabularies plus a duplicate-free triple store.

    Attributes:
        entities: name -> index, first-appearance order
        relations: name -> index, first-appearance order
        triples: (n, 3) int array of (head, relation, tail) in file order
        duplicates_dropped: number of repeated lines ignored while loading
    """
    entities: Dict[str, int]
    relations: Dict[str, int]
    triples: np.ndarray
    duplicates_dropped: int = 0
    adjacency: List[List[Tuple[int, int]]] = field(init=False, repr=False)
    _by_relation: Dict[int, np.ndarray] = field(init=False, repr=False)
    _true_tails: Dict[Tuple[int, int], Set[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if self.triples.size:
            if self.triples[:, [0, 2]].max() >= self.n_entities or self.triples[:, 1].max() >= self.n_relations \
                    or self.triples.min() < 0:
                raise VocabularyError("triple index outside vocabulary bounds")
        self.adjacency = [[] for _ in range(self.n_entities)]
        by_rel: Dict[int, List[int]] = defaultdict(list)
        self._true_tails = defaultdict(set)
        for i, (h, r, t) in enumerate(self.triples.tolist()):
            self.adjacency[h].append((r, t))
            by_rel[r].append(i)
            self._true_tails[(h, r)].add(t)
        self._by_relation = {r: self.triples[idx] for r, idx in by_rel.items()}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def entity_names(self) -> List[str]:
        return list(self.entities)

    @property
    def relation_names(self) -> List[str]:
        return list(self.relations)

    def relation_index(self, name: str) -> int:
        if name not in self.relations:
            raise VocabularyError(f"unknown relation: {name}")
        return self.relations[name]

    def entity_index(self, name: str) -> int:
        if name not in self.entities:
            raise VocabularyError(f"unknown entity: {name}")
        return self.entities[name]

    def triples_of(self, relation: int) -> np.ndarray:
        """Triples of one relation in file order, shape (m, 3)."""
        return self._by_relation.get(relation, np.zeros((0, 3), dtype=np.int64))

    def true_tails(self, head: int, relation: int) -> Set[int]:
        return self._true_tails.get((head, relation), set())

    def subgraph(self, keep: np.ndarray) -> "KnowledgeGraph":
        """Same vocabularies, only the triples selected by the boolean mask."""
        return KnowledgeGraph(dict(self.entities), dict(self.relations), self.triples[keep])


def load_triples(path: PathLike) -> KnowledgeGraph:
    """
    Load a tab-separated triple file.

    Args:
        path: UTF-8 file with one 'head<TAB>relation<TAB>tail' per line

    Returns:
        KnowledgeGraph with vocabularies in first-appearance order
    """
    entities: Dict[str, int] = {}
    relations: Dict[str, int] = {}
    seen: Set[Tuple[int, int, int]] = set()
    rows: List[Tuple[int, int, int]] = []
    duplicates = 0

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            h, r, t = (p.strip() for p in parts)
            hi = entities.setdefault(h, len(entities))
            ri = relations.setdefault(r, len(relations))
            ti = entities.setdefault(t, len(entities))
            key = (hi, ri, ti)
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            rows.append(key)

    if not rows:
        raise InsufficientDataError(f"no triples in {path}")
    if duplicates:
        logger.info("Dropped %d duplicate triples from %s", duplicates, path)
    kg = KnowledgeGraph(entities, relations, np.array(rows, dtype=np.int64), duplicates_dropped=duplicates)
    logger.info("Loaded %d entities, %d relations, %d triples", kg.n_entities, kg.n_relations, len(kg.triples))
    return kg


def save_triples(kg: KnowledgeGraph, path: PathLike) -> None:
    ents, rels = kg.entity_names, kg.relation_names
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples.tolist():
            fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")


# =============================================================================
# SPLITS
# =============================================================================

@dataclass
class TaskSplit:
    """Disjoint train/valid/test relation index lists."""
    train: List[int]
    valid: List[int]
    test: List[int]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.valid), set(self.test)
        overlap = (a & b) | (a & c) | (b & c)
        if overlap:
            raise ValueError(f"split relation sets overlap: {sorted(overlap)}")

    @property
    def held_out(self) -> Set[int]:
        return set(self.valid) | set(self.test)


def load_split(path: PathLike, kg: KnowledgeGraph) -> TaskSplit:
    """Read {"train": [...], "valid": [...], "test": [...]} relation names."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    missing = [name for key in ("train", "valid", "test") for name in payload.get(key, [])
               if name not in kg.relations]
    if missing:
        raise VocabularyError(f"split names unknown relations: {', '.join(missing)}")
    return TaskSplit(*([kg.relations[n] for n in payload.get(key, [])] for key in ("train", "valid", "test")))


def save_split(split: TaskSplit, kg: KnowledgeGraph, path: PathLike) -> None:
    names = kg.relation_names
    payload = {key: [names[r] for r in getattr(split, key)] for key in ("train", "valid", "test")}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def background_graph(kg: KnowledgeGraph, split: TaskSplit) -> KnowledgeGraph:
    """Graph used for neighbor encoding: every triple except those of valid/test relations."""
    held = np.array(sorted(split.held_out), dtype=np.int64)
    keep = ~np.isin(kg.triples[:, 1], held)
    return kg.subgraph(keep)


def training_relations(kg: KnowledgeGraph, split: TaskSplit, K: int, extra: bool = True) -> List[int]:
    """
    Relations episodes are sampled from.

    With `extra`, every non-evaluation relation with more than K+1 triples joins
    the split's training relations.
    """
    rels = [r for r in split.train if len(kg.triples_of(r)) > K]
    if extra:
        held = split.held_out | set(rels)
        rels += [r for r in range(kg.n_relations) if r not in held and len(kg.triples_of(r)) > K + 1]
    return rels


# =============================================================================
# EPISODES
# =============================================================================

@dataclass
class FewShotTask:
    """
    One relation's episode.

    context holds K positives first, then n*K negatives, each as (head, tail, label).
    """
    relation: int
    context: List[Tuple[int, int, int]]
    target_pos: List[Tuple[int, int]]
    target_neg: List[Tuple[int, int]]
    K: int

    @property
    def support(self) -> List[Tuple[int, int]]:
        return [(h, t) for h, t, _ in self.context[:self.K]]

    @property
    def n_queries(self) -> int:
        return len(self.target_pos)

    def context_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        arr = np.array(self.context, dtype=np.int64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2].astype(np.float64)

    def target_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.array(self.target_pos, dtype=np.int64).reshape(-1, 2)
        neg = np.array(self.target_neg, dtype=np.int64).reshape(-1, 2)
        both = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        return both[:, 0], both[:, 1], labels


def sample_negative_tail(kg: KnowledgeGraph, head: int, relation: int, rng: np.random.Generator) -> int:
    """Uniform tail such that (head, relation, tail) is not a known triple."""
    forbidden = kg.true_tails(head, relation)
    if len(forbidden) >= kg.n_entities:
        raise InsufficientDataError(f"every entity is a true tail of head {head} under relation {relation}")
    while True:
        t = int(rng.integers(kg.n_entities))
        if t not in forbidden:
            return t


def build_task(kg: KnowledgeGraph, relation: int, K: int, n: int, query_neg_per_pos: int,
               rng: np.random.Generator, max_queries: Optional[int] = None) -> FewShotTask:
    """
    Build a few-shot episode for one relation.

    Args:
        kg: Full graph (negatives are rejected against its true triples)
        relation: Relation index
        K: Support size; the first K triples in file order
        n: Context negatives per support triple
        query_neg_per_pos: Negatives per query positive
        rng: Random stream for negative sampling
        max_queries: Optional cap on query positives (first ones kept)

    Returns:
        FewShotTask
    """
    if n < 1:
        raise ValueError("negative sampling size n must be >= 1")
    rows = kg.triples_of(relation)
    if len(rows) <= K:
        raise InsufficientDataError(f"relation {relation} has {len(rows)} triples, needs more than K={K}")

    support = rows[:K]
    query = rows[K:] if max_queries is None else rows[K:K + max_queries]
    context = [(int(h), int(t), 1) for h, _, t in support]
    for _ in range(n):
        for h, _, _ in support:
            context.append((int(h), sample_negative_tail(kg, int(h), relation, rng), 0))

    target_pos = [(int(h), int(t)) for h, _, t in query]
    target_neg = [(h, sample_negative_tail(kg, h, relation, rng))
                  for h, _ in target_pos for _ in range(query_neg_per_pos)]
    return FewShotTask(relation, context, target_pos, target_neg, K)


def categorize_relation(kg: KnowledgeGraph, relation: int) -> RelationCategory:
    """one_to_many iff heads have on average more than 1.5 distinct tails."""
    rows = kg.triples_of(relation)
    if len(rows) == 0:
        raise VocabularyError(f"relation {relation} has no triples")
    frame = pd.DataFrame(rows[:, [0, 2]], columns=["head", "tail"])
    mean_tails = frame.groupby("head")["tail"].nunique().mean()
    return RelationCategory.ONE_TO_MANY if mean_tails > ONE_TO_MANY_THRESHOLD else RelationCategory.ONE_TO_ONE


# =============================================================================
# EMBEDDINGS
# =============================================================================

@dataclass(eq=False)
class EmbeddingTable:
    entity: np.ndarray
    relation: np.ndarray

    def __post_init__(self):
        self.entity = np.asarray(self.entity, dtype=np.float64)
        self.relation = np.asarray(self.relation, dtype=np.float64)
        if self.entity.ndim != 2 or self.relation.ndim != 2 or self.entity.shape[1] != self.relation.shape[1]:
            raise DimensionError(f"embedding shapes disagree: {self.entity.shape} vs {self.relation.shape}")
        if not (np.all(np.isfinite(self.entity)) and np.all(np.isfinite(self.relation))):
            raise ValueError("embedding table contains non-finite values")

    @property
    def d(self) -> int:
        return self.entity.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.entity.copy(), self.relation.copy())

    def nonnegative(self, floor: float = 0.5) -> "EmbeddingTable":
        """
        Shift every entity by one vector so each coordinate is at least `floor`.

        h + r - t is unchanged for every triple, so TransE scores are too.
        """
        return EmbeddingTable(self.entity - self.entity.min(axis=0) + floor, self.relation.copy())


def init_embeddings(kg: KnowledgeGraph, d: int, rng: np.random.Generator) -> EmbeddingTable:
    """Uniform(-6/sqrt(d), 6/sqrt(d)) rows for every entity and relation."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    bound = 6.0 / np.sqrt(d)
    return EmbeddingTable(rng.uniform(-bound, bound, size=(kg.n_entities, d)),
                          rng.uniform(-bound, bound, size=(kg.n_relations, d)))


def save_embeddings(table: EmbeddingTable, kg: KnowledgeGraph, path: PathLike) -> None:
    """
    Write header 'count dim' then 'name v1 ... vd' per row, entities first.

    Values use 17 significant digits so a reload is bit-identical.
    """
    clash = set(kg.entities) & set(kg.relations)
    if clash:
        raise VocabularyError(f"names used for both entities and relations: {', '.join(sorted(clash))}")
    names = kg.entity_names + kg.relation_names
    matrix = np.vstack([table.entity, table.relation])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(names)} {table.d}\n")
        for name, row in zip(names, matrix):
            fh.write(name + " " + " ".join(format(v, ".17g") for v in row) + "\n")


def load_embeddings(path: PathLike, kg: KnowledgeGraph) -> EmbeddingTable:
    """
    Read an embedding file and map rows onto the graph's vocabularies.

    Raises:
        ParseError: bad header or row
        VocabularyError: vocabulary entries absent from the file
    """
    rows: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError("header must be 'count dim'", line=1)
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise ParseError("header must be 'count dim'", line=1) from exc
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"expected name and {dim} values, got {len(parts)} fields", line=lineno)
            try:
                rows[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"non-numeric value: {exc}", line=lineno) from exc
    if len(rows) != count:
        logger.warning("Embedding header says %d rows, file has %d", count, len(rows))

    missing = [n for n in list(kg.entities) + list(kg.relations) if n not in rows]
    if missing:
        raise VocabularyError(f"embeddings missing for: {', '.join(missing)}")
    return EmbeddingTable(np.array([rows[n] for n in kg.entities]).reshape(kg.n_entities, dim),
                          np.array([rows[n] for n in kg.relations]).reshape(kg.n_relations, dim))


def pretrain_transe(kg: KnowledgeGraph, d: int, epochs: int, margin: float, lr: float,
                    rng: np.random.Generator, init: Optional[EmbeddingTable] = None) -> EmbeddingTable:
    """
    Full-batch TransE with corrupted tails and a margin ranking loss on ||h + r - t||^2.

    Args:
        kg: Graph to fit
        d: Embedding width
        epochs: Number of Adam steps
        margin: Ranking margin
        lr: Adam learning rate
        rng: Stream for initialization and corruption
        init: Optional starting table (drawn with init_embeddings otherwise)

    Returns:
        Trained EmbeddingTable
    """
    if len(kg.triples) == 0:
        raise InsufficientDataError("cannot pretrain on an empty graph")
    table = init.copy() if init is not None else init_embeddings(kg, d, rng)
    if epochs == 0:
        return table

    ent = Tensor(table.entity, requires_grad=True)
    rel = Tensor(table.relation, requires_grad=True)
    params = {"entity": ent, "relation": rel}
    opt = dc.Adam(params, lr=lr)
    h, r, t = kg.triples[:, 0], kg.triples[:, 1], kg.triples[:, 2]

    def distance(heads, rels, tails) -> Tensor:
        diff = dc.take(ent, heads) + dc.take(rel, rels) - dc.take(ent, tails)
        return dc.square(diff).sum(axis=1)

    losses = []
    for _ in range(epochs):
        corrupt = np.array([sample_negative_tail(kg, hh, rr, rng) for hh, rr in zip(h.tolist(), r.tolist())])
        hinge = dc.relu(distance(h, r, t) - distance(h, r, corrupt) + margin)
        loss = hinge.mean()
        losses.append(loss.item())
        opt.zero_grad()
        dc.backward(loss)
        opt.step()
    logger.info("TransE pretraining: loss %.4f -> %.4f over %d epochs", losses[0], losses[-1], epochs)
    return EmbeddingTable(ent.data.copy(), rel.data.copy())
