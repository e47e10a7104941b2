"""
NP-FKGC - Evaluation Harness
Filtered ranking metrics, per-category breakdowns, few-shot size sweeps with latent
entropy, training-log diagnostics and flow studies.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from tqdm import tqdm

from src import diffcore as dc
from src.config import TrainConfig
from src.exceptions import InsufficientDataError, ParseError, VocabularyError
from src.kgdata import KnowledgeGraph, TaskSplit, build_task, categorize_relation
from src.models import NPFKGCModel
from src.npflow import latent_entropy
from src.utils import rng_stream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# =============================================================================
# RANKS AND METRICS
# =============================================================================

def rank_of_truth(scores: Mapping[int, float], truth: int, filtered_exclusions: Iterable[int] = ()) -> int:
    """
    1 + number of non-excluded candidates scoring strictly lower than the truth.

    Equal scores rank behind the truth. The truth itself is never excluded.
    """
    if truth not in scores:
        raise VocabularyError(f"true tail {truth} is not among the candidates")
    excluded = set(filtered_exclusions) - {truth}
    target = scores[truth]
    return 1 + sum(1 for c, s in scores.items() if c not in excluded and s < target)


def _rank_vector(candidates: np.ndarray, scores: np.ndarray, truth: int, excluded: Set[int]) -> int:
    hit = np.flatnonzero(candidates == truth)
    if hit.size == 0:
        raise VocabularyError(f"true tail {truth} is not among the candidates")
    target = scores[hit[0]]
    keep = np.ones(len(candidates), dtype=bool)
    if excluded:
        keep &= ~np.isin(candidates, list(excluded - {truth}))
    return 1 + int(np.count_nonzero(scores[keep] < target))


def compute_metrics(ranks: Sequence[int], hits_at: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
    """
    MRR and Hits@N from raw ranks.

    Args:
        ranks: 1-based ranks of the true tails
        hits_at: Cutoffs N

    Returns:
        {'mrr': ..., 'hits@1': ..., ...}
    """
    if len(ranks) == 0:
        raise InsufficientDataError("no ranks to summarize")
    r = np.asarray(ranks, dtype=np.float64)
    out = {"mrr": float(np.mean(1.0 / r))}
    for n in hits_at:
        out[f"hits@{n}"] = float(np.mean(r <= n))
    return out


# =============================================================================
# EVALUATION
# =============================================================================

@dataclass(eq=False)
class EvalReport:
    """Per-relation detail plus query-weighted aggregates."""
    per_relation: pd.DataFrame
    metrics: Dict[str, float]
    per_category: Dict[str, Dict[str, float]]
    mean_entropy: float
    n_queries: int
    skipped: List[str] = field(default_factory=list)
    test_seconds: float = 0.0
    K: int = 0
    ranks: List[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        return {
            "K": self.K,
            "metrics": self.metrics,
            "per_category": self.per_category,
            "mean_entropy": self.mean_entropy,
            "n_queries": self.n_queries,
            "skipped": self.skipped,
            "test_seconds": self.test_seconds,
            "per_relation": self.per_relation.drop(columns=["ranks"]).to_dict(orient="records"),
        }

    def to_json(self, path: Optional[PathLike] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def load_candidates(path: PathLike, kg: KnowledgeGraph) -> Dict[int, np.ndarray]:
    """JSON {relation name: [candidate entity names]} -> relation index -> entity indices."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return {kg.relation_index(rel): np.array([kg.entity_index(e) for e in names], dtype=np.int64)
            for rel, names in payload.items()}


def evaluate_model(model: NPFKGCModel, kg: KnowledgeGraph, relations: Sequence[int], K: int,
                   rng: Optional[np.random.Generator] = None, candidates: Optional[Dict[int, np.ndarray]] = None,
                   with_entropy: bool = True, progress: bool = False) -> EvalReport:
    """
    Rank every query tail of every relation against the candidate set.

    Args:
        model: Model to evaluate (read only)
        kg: Full graph; supports come from its first K triples per relation
        relations: Relation indices to evaluate
        K: Support size
        rng: Stream for context negatives
        candidates: Per-relation candidate lists; all entities when absent
        with_entropy: Estimate the latent entropy per relation
        progress: Show a tqdm bar over relations
    """
    cfg = model.config
    rng = rng if rng is not None else rng_stream(cfg.seed, "eval")
    # latent draws use their own stream so context negatives do not depend on with_entropy
    latent_rng = rng_stream(cfg.seed, "entropy")
    all_entities = np.arange(kg.n_entities)
    names = kg.relation_names
    rows, all_ranks, skipped = [], [], []

    with dc.no_grad():
        reps = model.encode_entities()
        for r in tqdm(relations, desc="relations", disable=not progress):
            r = int(r)
            if len(kg.triples_of(r)) <= K:
                logger.warning("Skipping relation %s: %d triples, K=%d", names[r], len(kg.triples_of(r)), K)
                skipped.append(names[r])
                continue
            task = build_task(kg, r, K, cfg.n, 0, rng)
            r_prime = model.encode_task(task, reps)
            latent = model.predict_latent(task, reps, latent_rng, sample=cfg.sample_latent_at_test)
            z_T = latent.z_T[0]
            entropy = (latent_entropy(model.flow, latent.mu, latent.sigma, cfg.entropy_samples, latent_rng)
                       if with_entropy and model.flow is not None else float("nan"))

            pool = candidates.get(r, all_entities) if candidates is not None else all_entities
            ranks = []
            for h, t in task.target_pos:
                cand = pool if t in pool else np.append(pool, t)
                scores = model.score_pairs(reps, np.full(len(cand), h), cand, r_prime, z_T).data
                excluded = kg.true_tails(h, r) if cfg.filtered else set()
                ranks.append(_rank_vector(cand, scores, t, excluded))

            rows.append({
                "relation": names[r],
                "category": categorize_relation(kg, r).value,
                "n_queries": len(ranks),
                **compute_metrics(ranks, cfg.hits_at),
                "entropy": entropy,
                "ranks": ranks,
            })
            all_ranks.extend(ranks)

    columns = ["relation", "category", "n_queries", "mrr", *[f"hits@{n}" for n in cfg.hits_at], "entropy", "ranks"]
    per_relation = pd.DataFrame(rows, columns=columns)
    metrics = compute_metrics(all_ranks, cfg.hits_at) if all_ranks else {}
    per_category = {}
    for category, group in per_relation.groupby("category"):
        per_category[category] = compute_metrics([x for rs in group["ranks"] for x in rs], cfg.hits_at)
    mean_entropy = float(per_relation["entropy"].mean()) if with_entropy and rows else float("nan")
    return EvalReport(per_relation, metrics, per_category, mean_entropy, len(all_ranks), skipped,
                      K=K, ranks=all_ranks)


def evaluate(ckpt, kg: KnowledgeGraph, split: TaskSplit, K: Optional[int] = None,
             candidate_policy: str = "all_entities", candidates: Optional[Dict[int, np.ndarray]] = None,
             relations: Optional[Sequence[int]] = None, model: Optional[NPFKGCModel] = None) -> EvalReport:
    """
    Evaluate a checkpoint on the test relations.

    Args:
        ckpt: ModelCheckpoint
        kg: Full graph
        split: Relation split (test relations by default)
        K: Support size (checkpoint config K when absent)
        candidate_policy: 'all_entities' or 'provided_list'
        candidates: Required for 'provided_list'
        relations: Override the evaluated relations
        model: Already-built model for this checkpoint
    """
    if candidate_policy not in ("all_entities", "provided_list"):
        raise ValueError(f"Unknown candidate policy: {candidate_policy}")
    if candidate_policy == "provided_list" and candidates is None:
        raise ValueError("provided_list policy needs a candidate mapping")
    K = K if K is not None else ckpt.config.K
    model = model or ckpt.build_model(kg, split)
    start = time.perf_counter()
    report = evaluate_model(model, kg, relations if relations is not None else split.test, K,
                            rng=rng_stream(ckpt.config.seed, "eval"),
                            candidates=candidates if candidate_policy == "provided_list" else None)
    report.test_seconds = time.perf_counter() - start
    if report.n_queries:
        logger.info("Evaluated %d queries at K=%d: MRR %.4f", report.n_queries, K, report.metrics["mrr"])
    else:
        logger.warning("No relation could be evaluated at K=%d", K)
    return report


@dataclass
class SweepResult:
    table: pd.DataFrame
    spearman_rho: float
    spearman_p: float


def kshot_sweep(ckpt, kg: KnowledgeGraph, split: TaskSplit, K_values: Sequence[int]) -> SweepResult:
    """
    Evaluate at several support sizes and correlate K with the mean latent entropy.
    """
    if not K_values:
        raise ValueError("K_values must be nonempty")
    model = ckpt.build_model(kg, split)
    rows = []
    for K in K_values:
        report = evaluate(ckpt, kg, split, K=K, model=model)
        rows.append({"K": K, **report.metrics, "mean_entropy": report.mean_entropy, "n_queries": report.n_queries})
    table = pd.DataFrame(rows)
    if len(table) > 1 and table["mean_entropy"].notna().all():
        rho, p = spearmanr(table["K"], table["mean_entropy"])
    else:
        rho, p = float("nan"), float("nan")
    return SweepResult(table, float(rho), float(p))


# =============================================================================
# TRAINING-LOG DIAGNOSTICS
# =============================================================================

def parse_training_log(source: Union[PathLike, Sequence[str]]) -> pd.DataFrame:
    """
    Parse key=value epoch lines into a DataFrame; blank lines are ignored.
    """
    lines = Path(source).read_text(encoding="utf-8").splitlines() if isinstance(source, (str, Path)) else source
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        record = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise ParseError(f"expected key=value, got {token!r}", line=lineno)
            try:
                record[key] = float(value)
            except ValueError as exc:
                raise ParseError(f"non-numeric value for {key}: {value!r}", line=lineno) from exc
        if "epoch" not in record:
            raise ParseError("missing epoch field", line=lineno)
        records.append(record)
    return pd.DataFrame(records)


def kl_trajectory(source: Union[PathLike, Sequence[str]]) -> pd.DataFrame:
    """(epoch, kl) series from a training log."""
    log = parse_training_log(source)
    if log.empty:
        return pd.DataFrame({"epoch": pd.Series(dtype=int), "kl": pd.Series(dtype=float)})
    if "kl" not in log.columns:
        raise ParseError("training log has no kl field")
    return pd.DataFrame({"epoch": log["epoch"].astype(int), "kl": log["kl"]})


# =============================================================================
# FLOW STUDIES
# =============================================================================

def _study_row(kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig, embeddings,
               log_path: Optional[Path]) -> Dict[str, float]:
    from src.trainer import Trainer

    trainer = Trainer(kg, split, config, embeddings, log_path=log_path)
    best = trainer.fit()
    report = evaluate(best, kg, split, model=best.build_model(kg, split))
    history = trainer.history_frame()
    one_to_many = report.per_category.get("one_to_many", {}).get("mrr", float("nan"))
    return {
        "mrr": report.metrics.get("mrr", float("nan")),
        "hits@1": report.metrics.get("hits@1", float("nan")),
        "one_to_many_mrr": one_to_many,
        "seconds_per_epoch": float(history["seconds"].mean()) if len(history) else float("nan"),
        "test_seconds": report.test_seconds,
        "final_kl": float(history["kl"].iloc[-1]) if len(history) else float("nan"),
        "epochs": int(len(history)),
    }


def flow_step_study(kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig, T_values: Sequence[int],
                    embeddings=None, log_dir: Optional[PathLike] = None) -> pd.DataFrame:
    """
    Train and test once per number of flow stages; includes per-epoch and test time.

    With `log_dir`, each run writes its training log as train_T<T>.log there.
    """
    rows = []
    for T in T_values:
        logger.info("Flow-step study: T=%d", T)
        log_path = Path(log_dir) / f"train_T{T}.log" if log_dir is not None else None
        rows.append({"T": T, **_study_row(kg, split, config.updated(T=T), embeddings, log_path)})
    return pd.DataFrame(rows)


def flow_kind_study(kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig, kinds: Sequence[str],
                    embeddings=None, log_dir: Optional[PathLike] = None) -> pd.DataFrame:
    rows = []
    for kind in kinds:
        logger.info("Flow-kind study: %s", kind)
        log_path = Path(log_dir) / f"train_{kind}.log" if log_dir is not None else None
        rows.append({"flow": kind, **_study_row(kg, split, config.updated(flow=kind), embeddings, log_path)})
    return pd.DataFrame(rows)


# Component removals, each a TrainConfig override relative to the full model
ABLATIONS: Dict[str, Dict[str, object]] = {
    "full": {},
    "no_np": {"use_np": False},
    "no_flow": {"T": 0},
    "no_manifold": {"decoder": "transe"},
    "no_gnn": {"use_gnn": False},
}


def ablation_study(kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig,
                   variants: Optional[Sequence[str]] = None, embeddings=None,
                   log_dir: Optional[PathLike] = None) -> pd.DataFrame:
    """
    Train and test the full model and each variant with one component removed.

    Args:
        variants: Keys of ABLATIONS, all of them when absent
        log_dir: Each run writes train_<variant>.log here
    """
    variants = list(ABLATIONS) if variants is None else list(variants)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATIONS)}")
    rows = []
    for name in variants:
        logger.info("Ablation study: %s", name)
        log_path = Path(log_dir) / f"train_{name}.log" if log_dir is not None else None
        rows.append({"variant": name,
                     **_study_row(kg, split, config.updated(**ABLATIONS[name]), embeddings, log_path)})
    return pd.DataFrame(rows)
