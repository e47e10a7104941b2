"""
NP-FKGC - Command Line
Sub-commands for synthetic data, training, evaluation, K-shot sweeps, flow studies
and checkpoint inspection.
"""

import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from src.config import RunConfig, load_run_config
from src.evalharness import (ablation_study, evaluate, flow_kind_study, flow_step_study, kl_trajectory,
                             kshot_sweep, load_candidates)
from src.exceptions import ConfigConflictError, FKGCError, InsufficientDataError
from src.kgdata import load_embeddings, load_split, load_triples
from src.synthetic import write_dataset
from src.trainer import Trainer, load_checkpoint, save_checkpoint
from src.utils import configure_logging, write_json, write_tsv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# =============================================================================
# ARGUMENTS
# =============================================================================

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", dest="train.seed", type=int)
    p.add_argument("--log-level", dest="log_level")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--triples")
    p.add_argument("--split")
    p.add_argument("--embeddings")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", dest="train.d", type=int)
    p.add_argument("--d-z", dest="train.d_z", type=int)
    p.add_argument("--L", dest="train.L", type=int)
    p.add_argument("--flow", dest="train.flow")
    p.add_argument("--T", dest="train.T", type=int)
    p.add_argument("--H", dest="train.H", type=int)
    p.add_argument("--lstm-layers", dest="train.lstm_layers", type=int)
    p.add_argument("--decoder", dest="train.decoder")
    p.add_argument("--no-gnn", dest="train.use_gnn", action="store_const", const=False)
    p.add_argument("--no-np", dest="train.use_np", action="store_const", const=False)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", dest="train.K", type=int)
    p.add_argument("--n", dest="train.n", type=int)
    p.add_argument("--epochs", dest="train.max_epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="train.steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--margin", dest="train.margin", type=float)
    p.add_argument("--patience", dest="train.patience", type=int)
    p.add_argument("--loss-orientation", dest="train.loss_orientation")
    p.add_argument("--freeze-embeddings", dest="train.freeze_embeddings", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npfkgc", description="Few-shot knowledge graph completion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train and write best/final checkpoints")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_training(p)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the test relations")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--K", dest="train.K", type=int)
    p.add_argument("--candidates")
    p.add_argument("--candidate-policy", dest="candidate_policy")
    p.add_argument("--sample-latent", dest="train.sample_latent_at_test", action="store_const", const=True)
    p.add_argument("--k-sweep", dest="k_sweep", type=_int_list, help="Also sweep these K, e.g. 1,3,5")

    p = sub.add_parser("sweep", help="Evaluate a checkpoint at several K with latent entropy")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--k-values", dest="k_values", type=_int_list)

    p = sub.add_parser("synth", help="Write a synthetic compositional graph")
    _add_common(p)
    p.add_argument("--n-entities", dest="synth.n_entities", type=int)
    p.add_argument("--n-background", dest="synth.n_background", type=int)
    p.add_argument("--n-train", dest="synth.n_train", type=int)
    p.add_argument("--n-valid", dest="synth.n_valid", type=int)
    p.add_argument("--n-test", dest="synth.n_test", type=int)
    p.add_argument("--arity", dest="synth.arity", type=int)
    p.add_argument("--one-to-many-fraction", dest="synth.one_to_many_fraction", type=float)
    p.add_argument("--heads-per-relation", dest="synth.heads_per_relation", type=int)
    p.add_argument("--embedding-dim", dest="synth.embedding_dim", type=int)
    p.add_argument("--pretrain-epochs", dest="synth.pretrain_epochs", type=int)

    p = sub.add_parser("inspect-checkpoint", help="Print a JSON summary of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("study", help="Train and test across flow steps, flow kinds or ablations")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--study", choices=("steps", "kinds", "ablation"))
    p.add_argument("--t-values", dest="t_values", type=_int_list)
    p.add_argument("--flow-kinds", dest="flow_kinds", type=_str_list)
    p.add_argument("--variants", type=_str_list, help="Ablation variants, e.g. full,no_np")
    return parser


# =============================================================================
# COMMANDS
# =============================================================================

def _load_data(run: RunConfig):
    kg = load_triples(run.triples)
    split = load_split(run.split, kg)
    embeddings = load_embeddings(run.embeddings, kg) if run.embeddings is not None else None
    return kg, split, embeddings


def cmd_train(run: RunConfig, args: argparse.Namespace) -> int:
    kg, split, embeddings = _load_data(run)
    out = run.output_dir
    trainer = Trainer(kg, split, run.train, embeddings, log_path=out / "train.log", progress=True)
    best = trainer.fit()
    save_checkpoint(best, out / "best.ckpt")
    save_checkpoint(trainer.final, out / "final.ckpt")
    write_tsv(trainer.history_frame(), out / "history.tsv")
    print(f"best epoch {best.epoch}  valid MRR {best.best_valid_mrr:.4f}  -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> int:
    kg, split, _ = _load_data(run)
    ckpt = load_checkpoint(run.checkpoint, run.train_overrides())
    candidates = load_candidates(run.candidates, kg) if run.candidate_policy == "provided_list" else None
    report = evaluate(ckpt, kg, split, candidate_policy=run.candidate_policy, candidates=candidates)
    report.to_json(run.output_dir / "report.json")
    if not report.n_queries:
        raise InsufficientDataError(f"no test relation has more than K={ckpt.config.K} triples")

    print(f"K={report.K}  queries={report.n_queries}  "
          + "  ".join(f"{k}={v:.4f}" for k, v in report.metrics.items()))
    for category, metrics in sorted(report.per_category.items()):
        print(f"  {category:<13} MRR={metrics['mrr']:.4f}")

    k_sweep = getattr(args, "k_sweep", None)
    if k_sweep:
        _write_sweep(ckpt, kg, split, k_sweep, run)
    return EXIT_OK


def _write_sweep(ckpt, kg, split, K_values: Sequence[int], run: RunConfig) -> None:
    sweep = kshot_sweep(ckpt, kg, split, K_values)
    write_tsv(sweep.table, run.output_dir / "sweep.tsv")
    write_json({"spearman_rho": sweep.spearman_rho, "spearman_p": sweep.spearman_p},
               run.output_dir / "sweep_summary.json")
    print(sweep.table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    print(f"Spearman(K, entropy) rho={sweep.spearman_rho:.4f} p={sweep.spearman_p:.4g}")


def cmd_sweep(run: RunConfig, args: argparse.Namespace) -> int:
    kg, split, _ = _load_data(run)
    ckpt = load_checkpoint(run.checkpoint, run.train_overrides())
    _write_sweep(ckpt, kg, split, run.k_values, run)
    return EXIT_OK


def cmd_synth(run: RunConfig, args: argparse.Namespace) -> int:
    paths = write_dataset(run.synth, run.output_dir, seed=run.train.seed)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return EXIT_OK


def checkpoint_summary(ckpt) -> Dict[str, Any]:
    return {
        "epoch": ckpt.epoch,
        "best_valid_mrr": ckpt.best_valid_mrr,
        "n_entities": len(ckpt.entity_names),
        "n_relations": len(ckpt.relation_names),
        "adam_step": ckpt.adam.step,
        "n_parameters": int(sum(np.size(p) for p in ckpt.params.values())),
        "parameters": {name: list(p.shape) for name, p in sorted(ckpt.params.items())},
        "config": ckpt.config.to_dict(),
    }


def cmd_inspect(run: RunConfig, args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(run.checkpoint)
    print(json.dumps(checkpoint_summary(ckpt), indent=2, sort_keys=True, default=float))
    return EXIT_OK


def cmd_study(run: RunConfig, args: argparse.Namespace) -> int:
    kg, split, embeddings = _load_data(run)
    out = run.output_dir
    if run.study == "steps":
        table = flow_step_study(kg, split, run.train, run.t_values, embeddings, log_dir=out)
    elif run.study == "kinds":
        table = flow_kind_study(kg, split, run.train, run.flow_kinds, embeddings, log_dir=out)
    else:
        table = ablation_study(kg, split, run.train, run.variants, embeddings, log_dir=out)
    write_tsv(table, out / "study.tsv")
    for log in sorted(out.glob("train_*.log")):
        write_tsv(kl_trajectory(log), out / f"kl_{log.stem[len('train_'):]}.tsv")
    print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "inspect-checkpoint": cmd_inspect,
    "study": cmd_study,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse flags, validate the run config, echo it and dispatch.

    Returns:
        0 on success, 1 for invalid configuration, 2 for runtime errors
    """
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "k_sweep")}
    configure_logging(logging.INFO)

    try:
        run = load_run_config(args.config, overrides)
    except ValueError as exc:
        # pydantic.ValidationError subclasses ValueError, as does json.JSONDecodeError
        logger.error("Invalid configuration:\n%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        logger.error("Could not read config %s: %s", args.config, exc)
        return EXIT_RUNTIME

    run.output_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(run.log_level, log_file=run.output_dir / "run.log")
    write_json(run.resolved(), run.output_dir / "resolved_config.json")
    logger.info("Running %s into %s", run.command, run.output_dir)

    try:
        return COMMANDS[run.command](run, args)
    except ConfigConflictError as exc:
        logger.error("Configuration conflict: %s", exc)
        return EXIT_INVALID
    except (FKGCError, OSError, ValueError) as exc:
        logger.error("%s failed: %s", run.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
