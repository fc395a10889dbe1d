"""Whole pipeline on the mock backend: ingest to report."""

import json
import os
import shutil

import pytest
from click.testing import CliRunner

from app.config import default_quotas
from app.influence import GradientRecord, write_gradients_jsonl
from app.jsonl import read_jsonl
from app.models import DialogueKind, NegativeQueryType
from main import cli

from conftest import e2e_dictionary

LANGUAGES = ["amh", "zul"]


def write_setup(base, name):
    raw = base / "raw"
    raw.mkdir(exist_ok=True)
    sources = []
    for lang, text in e2e_dictionary({"amh": 25, "zul": 25}).items():
        (raw / f"{lang}.txt").write_text(text, encoding="utf-8")
        sources.append({"path": f"raw/{lang}.txt", "profile": "line", "language": lang})
    per_kind = {k: 2 for k in default_quotas().per_kind}
    config = {
        "seed": 20260101,
        "languages": LANGUAGES,
        "sources": sources,
        "quotas": {"per_kind": per_kind, "languages": LANGUAGES},
        "split": {"test_size": 2},
        "output_dir": name,
    }
    path = base / f"{name}.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return str(path), base / name


def run(runner, config, *args):
    result = runner.invoke(cli, ["--no-progress", "--config", config, *args])
    assert result.exit_code == 0, result.output
    return result


def run_pipeline(runner, config):
    run(runner, config, "ingest")
    run(runner, config, "generate")
    run(runner, config, "build-dataset")


@pytest.fixture
def runner():
    return CliRunner()


def test_full_pipeline(runner, tmp_path):
    config, out = write_setup(tmp_path, "run-a")
    run_pipeline(runner, config)

    stats = json.loads((out / "corpus" / "stats.json").read_text(encoding="utf-8"))
    assert stats["total"] == 50

    dataset = out / "dataset"
    train = list(read_jsonl(str(dataset / "sft_train.jsonl")))
    test = list(read_jsonl(str(dataset / "sft_test.jsonl")))
    pairs = list(read_jsonl(str(dataset / "dpo_pairs.jsonl")))
    # two of each of ten kinds per language
    assert len(train) + len(test) == 2 * 10 * len(LANGUAGES)
    assert len(test) == 2 * len(LANGUAGES)
    # two of each of seven pair shapes per language
    assert len(pairs) == 2 * 7 * len(LANGUAGES)

    ds_stats = json.loads((dataset / "dataset_stats.json").read_text(encoding="utf-8"))
    kinds = {key.split("/")[1] for split in ("train", "test") for key in ds_stats["sft"][split]}
    assert kinds == {k.value for k in DialogueKind}
    negs = {key.split("/")[2] for key in ds_stats["dpo"]["pairs"]}
    assert {n.value for n in NegativeQueryType} <= negs
    assert ds_stats["dpo"]["unmatched"] == 0
    assert ds_stats["dpo"]["quarantined"] == 0

    # evaluate: echoing the references scores perfectly
    items = list(read_jsonl(str(dataset / "test_items.jsonl")))
    preds = tmp_path / "preds.jsonl"
    preds.write_text("".join(json.dumps({"id": i["id"], "prediction": i["reference"]}) + "\n" for i in items), encoding="utf-8")
    run(runner, config, "evaluate", "--predictions", str(preds))
    report = json.loads((out / "eval" / "report.json").read_text(encoding="utf-8"))
    assert report["corpus_chrf_pp"] == pytest.approx(100.0)
    assert report["items"] == len(items)

    # judge twice; a run agrees perfectly with itself
    run(runner, config, "judge")
    verdicts = list(read_jsonl(str(out / "judge" / "verdicts.jsonl")))
    assert len(verdicts) == len(test)
    first = tmp_path / "first_verdicts.jsonl"
    shutil.copy(out / "judge" / "verdicts.jsonl", first)
    run(runner, config, "judge", "--agreement-with", str(first))
    agreement = json.loads((out / "judge" / "agreement.json").read_text(encoding="utf-8"))
    assert agreement["items"] == len(test)
    assert all(k == pytest.approx(1.0) for k in agreement["kappa"].values())

    # influence feeds a keep-list back into build-dataset
    grads = [GradientRecord(sample_id=row["meta"]["dialogue_id"], split="train", vector=[float(i), 1.0]) for i, row in enumerate(train)]
    grads.append(GradientRecord(sample_id="val-0", split="validation", vector=[1.0, 0.0]))
    grad_path = tmp_path / "grads.jsonl"
    write_gradients_jsonl(str(grad_path), grads)
    run(runner, config, "influence", "--train-grads", str(grad_path))
    keep = out / "influence" / "keep_list.txt"
    kept = keep.read_text(encoding="utf-8").split()
    assert len(kept) == -(-len(train) * 9 // 10)
    run(runner, config, "build-dataset", "--keep-list", str(keep))
    assert len(list(read_jsonl(str(dataset / "sft_train.jsonl")))) == len(kept)

    result = run(runner, config, "report")
    assert os.path.exists(out / "reports" / "criteria.json")
    for lang in LANGUAGES:
        assert lang in result.stdout

    result = run(runner, config, "report", "--reference", "inventory", "--stats", str(dataset / "dataset_stats.json"))
    assert os.path.exists(out / "reports" / "inventory.json")


def test_same_seed_same_artifacts(runner, tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir()
    b_dir.mkdir()
    config_a, out_a = write_setup(a_dir, "run")
    config_b, out_b = write_setup(b_dir, "run")
    run_pipeline(runner, config_a)
    run_pipeline(runner, config_b)

    for name in ("sft_train.jsonl", "sft_test.jsonl", "dpo_pairs.jsonl", "test_items.jsonl", "dataset_stats.json"):
        assert (out_a / "dataset" / name).read_bytes() == (out_b / "dataset" / name).read_bytes(), name
    assert (out_a / "generations" / "plan.jsonl").read_bytes() == (out_b / "generations" / "plan.jsonl").read_bytes()


def test_rerun_resumes_from_checkpoints(runner, tmp_path):
    config, out = write_setup(tmp_path, "run")
    run_pipeline(runner, config)
    log = out / "generations" / "chosen-generator.jsonl"
    before = log.read_text(encoding="utf-8")
    result = run(runner, config, "generate")
    assert log.read_text(encoding="utf-8") == before
    assert "generations ok" in result.stderr
