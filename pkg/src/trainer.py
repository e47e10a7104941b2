"""
NP-FKGC - Episodic Training
Flow-aware ELBO, margin ranking likelihood, the training loop with early stopping,
and checkpoint persistence.
"""

import copy
import io
import json
import logging
import os
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src import diffcore as dc
from src.arpgnn import build_edge_index
from src.config import TrainConfig
from src.diffcore import AdamState, Tensor
from src.exceptions import (CheckpointError, ConfigConflictError, DimensionError,
                            InsufficientDataError, NumericError, VocabularyError)
from src.kgdata import (EmbeddingTable, FewShotTask, KnowledgeGraph, TaskSplit, background_graph, build_task,
                        training_relations)
from src.models import NPFKGCModel
from src.npflow import gaussian_log_density, transform
from src.utils import rng_stream, set_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_KEYS = ("epoch", "loss", "ranking", "log_q0", "sum_logdet", "log_prior", "kl", "valid_mrr", "seconds")

# Settings that change parameter shapes or the model graph; a checkpoint fixes them
ARCHITECTURE_FIELDS = ("d", "d_z", "L", "flow", "T", "H", "lstm_layers", "decoder", "use_gnn", "use_np")


# =============================================================================
# OBJECTIVE
# =============================================================================

def ranking_log_likelihood(scores_pos, scores_neg, margin: float = 1.0,
                           orientation: str = "corrected") -> Tensor:
    """
    −Σ max(0, S⁺ − S⁻ + γ) over aligned (positive, negative) pairs.

    Args:
        scores_pos: (m,) positive scores
        scores_neg: (m·q,) negative scores, q consecutive negatives per positive
        margin: γ
        orientation: 'corrected' (positives must score lower) or 'literal' (S⁻ − S⁺ + γ)

    Returns:
        Scalar log-likelihood (<= 0)
    """
    pos = scores_pos if isinstance(scores_pos, Tensor) else Tensor(scores_pos)
    neg = scores_neg if isinstance(scores_neg, Tensor) else Tensor(scores_neg)
    m, total = pos.size, neg.size
    if m == 0 or total == 0:
        raise InsufficientDataError("ranking likelihood needs positive and negative scores")
    if total % m:
        raise DimensionError(f"{total} negative scores cannot be aligned with {m} positives")
    q = total // m
    pos_grid = dc.expand(dc.reshape(pos, (m, 1)), (m, q))
    neg_grid = dc.reshape(neg, (m, q))
    if orientation == "corrected":
        gap = pos_grid - neg_grid
    elif orientation == "literal":
        gap = neg_grid - pos_grid
    else:
        raise ValueError(f"Unknown loss orientation: {orientation}")
    return -dc.relu(gap + margin).sum()


@dataclass(eq=False)
class EpisodeLoss:
    """
    The four ELBO addends of one episode; total = −(ranking − log_q0 + sum_logdet + log_prior).
    """
    total: Tensor
    ranking: Tensor
    log_q0: Tensor
    sum_logdet: Tensor
    log_prior: Tensor

    @property
    def log_p0(self) -> float:
        return self.log_prior.item() + self.sum_logdet.item()

    @property
    def kl(self) -> float:
        """Single-sample estimate of log Q0(z0|C,D) − log P0(z0|C)."""
        return self.log_q0.item() - self.log_p0

    def to_dict(self) -> Dict[str, float]:
        return {
            "loss": self.total.item(),
            "ranking": self.ranking.item(),
            "log_q0": self.log_q0.item(),
            "sum_logdet": self.sum_logdet.item(),
            "log_prior": self.log_prior.item(),
            "kl": self.kl,
        }


def elbo_loss(task: FewShotTask, model: NPFKGCModel, entity_reps: Tensor, rng: np.random.Generator,
              config: Optional[TrainConfig] = None) -> EpisodeLoss:
    """
    Negative flow-aware ELBO for one episode.

    The prior path encodes the context set; the posterior path encodes context and
    targets together. Both share one flow, so log P(z_T|C) is evaluated at the
    posterior pre-image z0 as log P0(z0|C) − Σ log|det|.
    """
    config = config or model.config
    if not task.context or not task.target_pos:
        raise InsufficientDataError("episode needs a nonempty context and target set")

    enc = model.np_encoder
    if enc is None:
        # no neural process: the objective is the ranking term alone
        latent = model.fixed_latent(config.mc_samples)
        log_q0 = sum_logdet = log_prior = Tensor(np.array(0.0))
    else:
        rows = model.context_rows(task, entity_reps, with_targets=True)
        n_context = len(task.context)
        codes = enc.encode_rows(rows)
        mu_c, sigma_c = enc.base_distribution(codes[0:n_context].mean(axis=0))
        mu_cd, sigma_cd = enc.base_distribution(codes.mean(axis=0))

        latent = transform(model.flow, mu_cd, sigma_cd, rng, config.mc_samples)
        log_q0 = latent.base_log_density.mean()
        sum_logdet = latent.sum_log_det.mean()
        log_prior = gaussian_log_density(latent.z0, mu_c, sigma_c).mean() - sum_logdet

    r_prime = model.encode_task(task, entity_reps)
    pos = np.array(task.target_pos, dtype=np.int64).reshape(-1, 2)
    neg = np.array(task.target_neg, dtype=np.int64).reshape(-1, 2)
    ranking = None
    for s in range(config.mc_samples):
        z_T = latent.z_T[s]
        s_pos = model.score_pairs(entity_reps, pos[:, 0], pos[:, 1], r_prime, z_T)
        s_neg = model.score_pairs(entity_reps, neg[:, 0], neg[:, 1], r_prime, z_T)
        term = ranking_log_likelihood(s_pos, s_neg, config.margin, config.loss_orientation)
        ranking = term if ranking is None else ranking + term
    ranking = ranking / float(config.mc_samples)

    total = -(ranking - log_q0 + sum_logdet + log_prior)
    loss = EpisodeLoss(total, ranking, log_q0, sum_logdet, log_prior)
    for name in ("total", "ranking", "log_q0", "sum_logdet", "log_prior"):
        if not np.all(np.isfinite(getattr(loss, name).data)):
            raise NumericError(f"non-finite ELBO term: {name}")
    return loss


# =============================================================================
# CHECKPOINTS
# =============================================================================

@dataclass(eq=False)
class ModelCheckpoint:
    """Everything needed to rebuild a trained model or resume training."""
    params: Dict[str, np.ndarray]
    adam: AdamState
    config: TrainConfig
    epoch: int
    best_valid_mrr: float
    entity_names: List[str]
    relation_names: List[str]
    history: Optional[pd.DataFrame] = field(default=None, repr=False)

    @classmethod
    def capture(cls, model: NPFKGCModel, adam: AdamState, kg: KnowledgeGraph, epoch: int,
                best_valid_mrr: float) -> "ModelCheckpoint":
        return cls(model.state_dict(), copy.deepcopy(adam), model.config, epoch, float(best_valid_mrr),
                   kg.entity_names, kg.relation_names)

    def build_model(self, kg: KnowledgeGraph, split: TaskSplit) -> NPFKGCModel:
        """Recreate the model on `kg` and load the stored parameters."""
        if kg.entity_names != self.entity_names or kg.relation_names != self.relation_names:
            raise VocabularyError("checkpoint vocabularies do not match the graph")
        cfg = self.config
        edges = build_edge_index(background_graph(kg, split), cfg.neighbor_cap, rng_stream(cfg.seed, "neighbors"))
        model = NPFKGCModel(cfg, kg.n_entities, kg.n_relations, edges, rng_stream(cfg.seed, "init"))
        model.load_state_dict(self.params)
        return model


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(ckpt: ModelCheckpoint, path: Union[str, Path]) -> Path:
    """
    Write a zip of named float64 .npy arrays plus a JSON header.

    Entry timestamps are fixed, so identical checkpoints give identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_valid_mrr": ckpt.best_valid_mrr,
        "entity_names": ckpt.entity_names,
        "relation_names": ckpt.relation_names,
        "adam": {**ckpt.adam.hyperparameters(), "step": ckpt.adam.step},
        "params": sorted(ckpt.params),
        "moments": sorted(ckpt.adam.m),
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "__meta__.json", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name in sorted(ckpt.params):
            _write_entry(zf, f"params/{name}.npy", _array_bytes(ckpt.params[name]))
        for name in sorted(ckpt.adam.m):
            _write_entry(zf, f"adam_m/{name}.npy", _array_bytes(ckpt.adam.m[name]))
            _write_entry(zf, f"adam_v/{name}.npy", _array_bytes(ckpt.adam.v[name]))
    os.replace(tmp, path)
    logger.info("Checkpoint (epoch %d) written to %s", ckpt.epoch, path)
    return path


def load_checkpoint(path: Union[str, Path], config_override: Optional[Dict] = None) -> ModelCheckpoint:
    """
    Read a checkpoint completely before returning it.

    Args:
        path: File written by save_checkpoint
        config_override: Optional TrainConfig fields; architecture fields must agree with the file

    Raises:
        CheckpointError: unreadable, truncated or wrong format version
        ConfigConflictError: override disagrees with the stored architecture
    """
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("__meta__.json").decode("utf-8"))
            version = meta.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}")
            read = lambda entry: np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
            params = {name: read(f"params/{name}.npy") for name in meta["params"]}
            m = {name: read(f"adam_m/{name}.npy") for name in meta["moments"]}
            v = {name: read(f"adam_v/{name}.npy") for name in meta["moments"]}
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    config = TrainConfig.from_dict(meta["config"])
    if config_override:
        conflicts = [f"{k}={config_override[k]!r} (checkpoint has {getattr(config, k)!r})"
                     for k in ARCHITECTURE_FIELDS if k in config_override and config_override[k] != getattr(config, k)]
        if conflicts:
            raise ConfigConflictError("config disagrees with checkpoint: " + ", ".join(conflicts))
        config = config.updated(**config_override)

    adam_meta = meta["adam"]
    adam = AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"], beta2=adam_meta["beta2"],
                     eps=adam_meta["eps"], step=adam_meta["step"], m=m, v=v)
    return ModelCheckpoint(params, adam, config, meta["epoch"], meta["best_valid_mrr"],
                           meta["entity_names"], meta["relation_names"])


# =============================================================================
# TRAINING LOOP
# =============================================================================

def format_log_line(record: Dict[str, float]) -> str:
    parts = []
    for key in LOG_KEYS:
        value = record[key]
        parts.append(f"{key}={int(value)}" if key == "epoch" else f"{key}={value:.10g}")
    return " ".join(parts)


class Trainer:
    """
    Episodic trainer: sample relations, build tasks, minimize the mean negative ELBO,
    validate by MRR each epoch and keep the best snapshot.
    """

    def __init__(self, kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig,
                 embeddings: Optional[EmbeddingTable] = None, log_path: Optional[Union[str, Path]] = None,
                 progress: bool = False):
        """
        Initialize the trainer.

        Args:
            kg: Full graph (negatives are filtered against it)
            split: Relation split
            config: Hyperparameters
            embeddings: Optional pretrained e0
            log_path: Optional key=value training log, one line per epoch
            progress: Show a tqdm bar over epochs
        """
        self.kg = kg
        self.split = split
        self.config = config
        self.log_path = Path(log_path) if log_path is not None else None
        self.progress = progress

        self.streams = set_seed(config.seed)
        self.relations = training_relations(kg, split, config.K, config.extra_train_relations)
        if not self.relations:
            raise InsufficientDataError(f"no training relation has more than K={config.K} triples")
        self.valid_relations = [r for r in split.valid if len(kg.triples_of(r)) > config.K]

        edges = build_edge_index(background_graph(kg, split), config.neighbor_cap, self.streams["neighbors"])
        self.model = NPFKGCModel(config, kg.n_entities, kg.n_relations, edges, self.streams["init"], embeddings)
        self.optimizer = dc.Adam(self.model.trainable_parameters(), lr=config.lr)

        self.history: List[Dict[str, float]] = []
        self.best: Optional[ModelCheckpoint] = None
        self.final: Optional[ModelCheckpoint] = None

    def train_step(self) -> Dict[str, float]:
        """One Adam update on the mean loss of `batch_size` freshly sampled episodes."""
        cfg = self.config
        rels = self.streams["tasks"].choice(np.asarray(self.relations), size=cfg.batch_size, replace=True)
        dc.get_tape().clear()
        self.optimizer.zero_grad()
        reps = self.model.encode_entities()
        losses = []
        for r in rels:
            task = build_task(self.kg, int(r), cfg.K, cfg.n, cfg.query_negatives, self.streams["tasks"],
                              cfg.max_queries)
            losses.append(elbo_loss(task, self.model, reps, self.streams["latent"], cfg))
        total = losses[0].total
        for episode in losses[1:]:
            total = total + episode.total
        mean_loss = total / float(len(losses))
        dc.backward(mean_loss)
        self.optimizer.step()

        terms = pd.DataFrame([episode.to_dict() for episode in losses]).mean()
        logger.debug("step loss %.6f", terms["loss"])
        return terms.to_dict()

    def validate(self) -> float:
        if not self.valid_relations:
            return float("nan")
        from src.evalharness import evaluate_model
        result = evaluate_model(self.model, self.kg, self.valid_relations, self.config.K,
                                rng=rng_stream(self.config.seed, "eval"), with_entropy=False)
        return result.metrics["mrr"] if result.ranks else float("nan")

    def _append_log(self, record: Dict[str, float]) -> None:
        line = format_log_line(record)
        logger.info(line)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def fit(self) -> ModelCheckpoint:
        """
        Run until max_epochs or until `patience` epochs pass without a better validation MRR.

        Returns:
            Best checkpoint (the initialization when max_epochs is 0)
        """
        cfg = self.config
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("", encoding="utf-8")

        best_mrr = -np.inf
        wait = 0
        if cfg.max_epochs == 0:
            best_mrr = self.validate()
            self.best = ModelCheckpoint.capture(self.model, self.optimizer.state, self.kg, 0, best_mrr)

        epochs = range(1, cfg.max_epochs + 1)
        for epoch in tqdm(epochs, desc="epochs", disable=not self.progress):
            start = time.perf_counter()
            steps = [self.train_step() for _ in range(cfg.steps_per_epoch)]
            terms = pd.DataFrame(steps).mean().to_dict()
            valid_mrr = self.validate()
            record = {"epoch": epoch, **terms, "valid_mrr": valid_mrr,
                      "seconds": time.perf_counter() - start}
            self.history.append(record)
            self._append_log(record)

            improved = np.isnan(valid_mrr) or valid_mrr > best_mrr
            if improved:
                best_mrr = valid_mrr if not np.isnan(valid_mrr) else best_mrr
                wait = 0
                self.best = ModelCheckpoint.capture(self.model, self.optimizer.state, self.kg, epoch, valid_mrr)
            else:
                wait += 1
                if wait >= cfg.patience:
                    logger.info("Early stopping at epoch %d (best valid MRR %.4f)", epoch, best_mrr)
                    break

        last_epoch = self.history[-1]["epoch"] if self.history else 0
        last_mrr = self.history[-1]["valid_mrr"] if self.history else best_mrr
        self.final = ModelCheckpoint.capture(self.model, self.optimizer.state, self.kg, int(last_epoch), last_mrr)
        history = self.history_frame()
        self.best.history = history
        self.final.history = history
        return self.best

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=list(LOG_KEYS))


def train(kg: KnowledgeGraph, split: TaskSplit, config: TrainConfig,
          embeddings: Optional[EmbeddingTable] = None, log_path: Optional[Union[str, Path]] = None) -> ModelCheckpoint:
    """Train and return the best checkpoint."""
    return Trainer(kg, split, config, embeddings, log_path).fit()
