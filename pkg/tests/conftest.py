from __future__ import annotations

import numpy as np
import pytest

from src import diffcore as dc
from src.config import SynthSettings, TrainConfig
from src.kgdata import KnowledgeGraph
from src.synthetic import generate_compositional_kg


@pytest.fixture(autouse=True)
def clean_tape():
    """Every test starts and ends with an empty, enabled tape."""
    tape = dc.get_tape()
    tape.clear()
    tape.enabled = True
    yield
    tape.clear()
    tape.enabled = True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _make_kg(rows, entities=None, relations=None) -> KnowledgeGraph:
    entities = dict(entities or {})
    relations = dict(relations or {})
    idx = []
    for h, r, t in rows:
        hi = entities.setdefault(h, len(entities))
        ri = relations.setdefault(r, len(relations))
        ti = entities.setdefault(t, len(entities))
        idx.append((hi, ri, ti))
    return KnowledgeGraph(entities, relations, np.array(idx, dtype=np.int64))


@pytest.fixture
def make_kg():
    """Build a graph from (head, relation, tail) name triples."""
    return _make_kg


@pytest.fixture
def tiny_settings() -> SynthSettings:
    return SynthSettings(n_entities=20, n_background=2, n_train=3, n_valid=1, n_test=2,
                         heads_per_relation=6, embedding_dim=4, pretrain_epochs=3)


@pytest.fixture
def tiny_graph(tiny_settings):
    return generate_compositional_kg(tiny_settings, seed=7)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(d=4, d_z=4, L=1, flow="planar", T=2, H=3, lstm_layers=1, K=2, batch_size=2,
                       max_epochs=2, patience=5, lr=0.01, entropy_samples=16, seed=3)
