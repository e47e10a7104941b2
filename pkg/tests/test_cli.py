from __future__ import annotations

import json

import pandas as pd
import pytest

from src.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from src.config import OUTPUT_DIR_ENV
from src.kgdata import RelationCategory, categorize_relation, load_split, load_triples

SYNTH_FLAGS = ["--n-entities", "20", "--n-background", "2", "--n-train", "3", "--n-valid", "1", "--n-test", "2",
               "--heads-per-relation", "6", "--embedding-dim", "4", "--pretrain-epochs", "3"]
MODEL_FLAGS = ["--d", "4", "--d-z", "4", "--L", "1", "--T", "2", "--H", "3", "--lstm-layers", "1",
               "--K", "2", "--batch-size", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus one short training run, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv(OUTPUT_DIR_ENV, raising=False)
        assert main(["synth", "--output-dir", str(root / "data"), "--seed", "3", *SYNTH_FLAGS]) == EXIT_OK
        assert main(["train", *data_flags(root), "--output-dir", str(root / "run"), "--epochs", "1",
                     *MODEL_FLAGS]) == EXIT_OK
    return root


@pytest.fixture(autouse=True)
def no_env_output_dir(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def data_flags(root):
    data = root / "data"
    return ["--triples", str(data / "triples.tsv"), "--split", str(data / "split.json"),
            "--embeddings", str(data / "embeddings.txt")]


def test_synth_and_train_outputs(workspace):
    assert {p.name for p in (workspace / "data").iterdir()} >= {"triples.tsv", "split.json", "embeddings.txt",
                                                                 "resolved_config.json", "run.log"}
    run = workspace / "run"
    for name in ("best.ckpt", "final.ckpt", "history.tsv", "train.log", "resolved_config.json"):
        assert (run / name).exists()
    history = pd.read_csv(run / "history.tsv", sep="\t")
    assert history["epoch"].tolist() == [1]
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["train"]["d"] == 4
    assert resolved["command"] == "train"


def test_eval_writes_a_report(workspace, capsys):
    out = workspace / "eval"
    code = main(["eval", *data_flags(workspace), "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--output-dir", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["K"] == 2
    assert report["n_queries"] > 0
    assert "queries=" in capsys.readouterr().out


def test_eval_with_k_sweep(workspace):
    out = workspace / "eval_sweep"
    code = main(["eval", *data_flags(workspace), "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--output-dir", str(out), "--k-sweep", "1,2"])
    assert code == EXIT_OK
    table = pd.read_csv(out / "sweep.tsv", sep="\t")
    assert table["K"].tolist() == [1, 2]
    assert "spearman_rho" in json.loads((out / "sweep_summary.json").read_text())


def test_sweep_command(workspace):
    out = workspace / "sweep"
    code = main(["sweep", *data_flags(workspace), "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--output-dir", str(out), "--k-values", "1,2,3"])
    assert code == EXIT_OK
    assert len(pd.read_csv(out / "sweep.tsv", sep="\t")) == 3


def test_inspect_checkpoint(workspace, capsys):
    code = main(["inspect-checkpoint", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--output-dir", str(workspace / "inspect")])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["config"]["K"] == 2
    assert summary["n_entities"] == 20
    assert summary["n_parameters"] == sum(
        int(pd.Series(shape).prod()) for shape in summary["parameters"].values())


def test_support_larger_than_every_relation_fails(workspace):
    code = main(["eval", *data_flags(workspace), "--checkpoint", str(workspace / "run" / "best.ckpt"),
                 "--output-dir", str(workspace / "huge"), "--K", "500"])
    assert code == EXIT_RUNTIME


def test_architecture_conflict_is_invalid(workspace, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"train": {"d": 8, "d_z": 8}}))
    code = main(["eval", "--config", str(config), *data_flags(workspace),
                 "--checkpoint", str(workspace / "run" / "best.ckpt"), "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_INVALID


def test_zero_epochs_writes_the_initialization(workspace):
    out = workspace / "zero"
    code = main(["train", *data_flags(workspace), "--output-dir", str(out), "--epochs", "0", *MODEL_FLAGS])
    assert code == EXIT_OK
    assert (out / "best.ckpt").exists()
    assert (out / "final.ckpt").exists()
    assert len(pd.read_csv(out / "history.tsv", sep="\t")) == 0
    assert (out / "train.log").read_text() == ""


def test_fixed_seed_reproduces_every_artifact(tmp_path):
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["synth", "--output-dir", str(root / "data"), "--seed", "5", *SYNTH_FLAGS]) == EXIT_OK
        assert main(["train", *data_flags(root), "--output-dir", str(root / "run"), "--epochs", "2", "--seed", "5",
                     *MODEL_FLAGS]) == EXIT_OK
    for rel in ("data/triples.tsv", "data/split.json", "data/embeddings.txt", "run/best.ckpt", "run/final.ckpt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_arity_alone_gives_one_to_many_relations(tmp_path):
    data = tmp_path / "many"
    assert main(["synth", "--output-dir", str(data), *SYNTH_FLAGS, "--n-entities", "64", "--arity", "3"]) == EXIT_OK
    kg = load_triples(data / "triples.tsv")
    split = load_split(data / "split.json", kg)
    for r in split.train + split.valid + split.test:
        assert categorize_relation(kg, r) is RelationCategory.ONE_TO_MANY, kg.relation_names[r]


def test_missing_inputs_are_invalid(tmp_path):
    assert main(["train", "--split", "s.json", "--output-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["synth", "--output-dir", str(tmp_path), "--n-background", "1"]) == EXIT_INVALID


def test_unreadable_or_malformed_config(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "absent.json")]) == EXIT_RUNTIME
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad)]) == EXIT_INVALID


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "from_env"))
    assert main(["synth", "--output-dir", str(tmp_path / "ignored"), *SYNTH_FLAGS]) == EXIT_OK
    assert (tmp_path / "from_env" / "triples.tsv").exists()
    assert not (tmp_path / "ignored").exists()


@pytest.mark.slow
def test_flow_step_study(workspace):
    out = workspace / "study"
    code = main(["study", *data_flags(workspace), "--output-dir", str(out), "--epochs", "1",
                 "--t-values", "0,1", *MODEL_FLAGS])
    assert code == EXIT_OK
    table = pd.read_csv(out / "study.tsv", sep="\t")
    assert table["T"].tolist() == [0, 1]
    assert (out / "kl_T0.tsv").exists()
    assert (out / "kl_T1.tsv").exists()


@pytest.mark.slow
def test_ablation_study(workspace):
    out = workspace / "ablation"
    code = main(["study", *data_flags(workspace), "--output-dir", str(out), "--epochs", "1",
                 "--study", "ablation", "--variants", "full,no_np", *MODEL_FLAGS])
    assert code == EXIT_OK
    table = pd.read_csv(out / "study.tsv", sep="\t")
    assert table["variant"].tolist() == ["full", "no_np"]
    assert (out / "kl_no_np.tsv").exists()


def test_unknown_ablation_variant_fails(workspace):
    code = main(["study", *data_flags(workspace), "--output-dir", str(workspace / "bad_ablation"), "--epochs", "1",
                 "--study", "ablation", "--variants", "no_decoder", *MODEL_FLAGS])
    assert code == EXIT_RUNTIME
