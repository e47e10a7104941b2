"""
NP-FKGC - Configuration
Engine hyperparameters (TrainConfig) and the validated run description (RunConfig).
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, PrivateAttr, model_validator

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "NPFKGC_OUTPUT_DIR"

FLOW_KINDS = ("planar", "radial", "realnvp")
DECODERS = ("smanifolde", "transe")
ORIENTATIONS = ("corrected", "literal")


@dataclass
class TrainConfig:
    """
    Hyperparameters of the model and of episodic training.
    """
    # Model sizes
    d: int = 100                 # entity/relation embedding width
    d_z: int = 100               # latent width (context encoding width too)
    L: int = 2                   # graph encoder layers
    flow: str = "planar"
    T: int = 10                  # flow stages; 0 disables the flow
    H: int = 700                 # Bi-LSTM hidden size
    lstm_layers: int = 2

    # Episodes
    K: int = 5
    n: int = 1                   # context negatives per support triple
    query_negatives: int = 1     # negatives per query positive
    max_queries: Optional[int] = None
    neighbor_cap: int = 64

    # Objective
    margin: float = 1.0
    mc_samples: int = 1
    loss_orientation: str = "corrected"
    decoder: str = "smanifolde"
    use_gnn: bool = True
    use_np: bool = True          # False: deterministic model with a fixed zero latent

    # Optimization
    lr: float = 0.001
    batch_size: int = 128
    steps_per_epoch: int = 1
    max_epochs: int = 200
    patience: int = 3
    freeze_embeddings: bool = False
    extra_train_relations: bool = True
    seed: int = 42

    # Evaluation
    sample_latent_at_test: bool = False
    entropy_samples: int = 256
    hits_at: Tuple[int, ...] = (1, 5, 10)
    filtered: bool = True

    def __post_init__(self):
        self.hits_at = tuple(int(n) for n in self.hits_at)
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> List[str]:
        """Every constraint violation, so callers can report them together."""
        out = []
        for name in ("d", "d_z", "H", "lstm_layers", "K", "n", "query_negatives", "mc_samples",
                     "batch_size", "steps_per_epoch", "patience", "entropy_samples", "neighbor_cap"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        for name in ("L", "T", "max_epochs"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        if self.margin < 0:
            out.append(f"margin must be >= 0 (got {self.margin})")
        if self.lr < 0:
            out.append(f"lr must be >= 0 (got {self.lr})")
        if self.max_queries is not None and self.max_queries < 1:
            out.append(f"max_queries must be >= 1 (got {self.max_queries})")
        if self.flow not in FLOW_KINDS:
            out.append(f"flow must be one of {FLOW_KINDS} (got {self.flow!r})")
        if self.decoder not in DECODERS:
            out.append(f"decoder must be one of {DECODERS} (got {self.decoder!r})")
        if self.loss_orientation not in ORIENTATIONS:
            out.append(f"loss_orientation must be one of {ORIENTATIONS} (got {self.loss_orientation!r})")
        if not self.hits_at or min(self.hits_at) < 1:
            out.append("hits_at must be a nonempty list of positive cutoffs")
        return out

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["hits_at"] = list(self.hits_at)
        return d

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {', '.join(unknown)}")
        return cls(**payload)

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


class SynthSettings(BaseModel):
    """Sizes of a generated compositional knowledge graph."""
    n_entities: int = Field(100, ge=2)
    n_background: int = Field(2, ge=2)
    n_train: int = Field(8, ge=1)
    n_valid: int = Field(2, ge=0)
    n_test: int = Field(4, ge=1)
    arity: int = Field(1, ge=1)
    one_to_many_fraction: Optional[float] = Field(None, ge=0.0, le=1.0)
    heads_per_relation: int = Field(20, ge=2)
    embedding_dim: int = Field(32, ge=1)
    pretrain_epochs: int = Field(200, ge=0)
    pretrain_lr: float = Field(0.01, ge=0.0)

    @property
    def many_fraction(self) -> float:
        """Share of few-shot relations built one-to-many; all of them when only arity is given."""
        if self.one_to_many_fraction is not None:
            return self.one_to_many_fraction
        return 1.0 if self.arity > 1 else 0.0


REQUIRED_BY_COMMAND = {
    "train": ("triples", "split"),
    "eval": ("triples", "split", "checkpoint"),
    "sweep": ("triples", "split", "checkpoint"),
    "study": ("triples", "split"),
    "synth": (),
    "inspect-checkpoint": ("checkpoint",),
}


class RunConfig(BaseModel):
    """
    Everything one CLI invocation needs. Loaded from JSON, overridden by flags.
    """
    command: Literal["train", "eval", "sweep", "synth", "inspect-checkpoint", "study"] = "train"
    triples: Optional[Path] = None
    split: Optional[Path] = None
    embeddings: Optional[Path] = None
    checkpoint: Optional[Path] = None
    candidates: Optional[Path] = None
    output_dir: Path = Path("runs/default")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthSettings = Field(default_factory=SynthSettings)

    candidate_policy: Literal["all_entities", "provided_list"] = "all_entities"
    k_values: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    study: Literal["steps", "kinds", "ablation"] = "steps"
    t_values: List[int] = Field(default_factory=lambda: [0, 1, 5, 10])
    flow_kinds: List[Literal["planar", "radial", "realnvp"]] = Field(
        default_factory=lambda: list(FLOW_KINDS))
    variants: Optional[List[str]] = None

    # train fields given explicitly (file or flags), as opposed to defaults
    _train_overrides: List[str] = PrivateAttr(default_factory=list)

    @model_validator(mode="after")
    def _check_required(self) -> "RunConfig":
        missing = [name for name in REQUIRED_BY_COMMAND[self.command] if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.command} requires: {', '.join(missing)}")
        if self.candidate_policy == "provided_list" and self.candidates is None:
            raise ValueError("candidate_policy=provided_list requires candidates")
        if any(k < 1 for k in self.k_values):
            raise ValueError("k_values must be positive")
        return self

    def train_overrides(self) -> Dict[str, Any]:
        """Validated values of the train fields the user set explicitly."""
        return {name: getattr(self.train, name) for name in self._train_overrides}

    def resolved(self) -> Dict[str, Any]:
        payload = self.model_dump(mode="json")
        payload["train"] = self.train.to_dict()
        return payload


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge a JSON config file, flag overrides and the output-dir env var.

    Args:
        path: Optional JSON file
        overrides: Flat mapping; keys 'train.<field>' and 'synth.<field>' target nested sections

    Returns:
        Validated RunConfig (raises pydantic.ValidationError listing every problem)
    """
    payload: Dict[str, Any] = {}
    if path is not None:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    payload.setdefault("train", {})
    payload.setdefault("synth", {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name and section in ("train", "synth"):
            payload[section][name] = value
        else:
            payload[key] = value
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        payload["output_dir"] = env_dir
    run = RunConfig.model_validate(payload)
    run._train_overrides = sorted(payload["train"])
    return run
