import json
import os
from pathlib import Path

import pytest

from clinseq.cli import main
from clinseq.corpus import dump_documents_jsonl
from clinseq.synthetic import RELATED_SOURCE, RELATED_TARGET, generate_corpus, unlabeled_texts

TINY_ENCODER = {"model_dim": 16, "num_heads": 2, "num_layers": 1, "feedforward_dim": 32,
                "max_positions": 256, "dropout_rate": 0.0}


def _write_jsonl(path, corpus):
    path.write_bytes(dump_documents_jsonl(corpus.documents))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A workspace with data, a vocabulary and a config using relative paths."""
    root = tmp_path_factory.mktemp("ws")
    _write_jsonl(root / "train.jsonl", generate_corpus(RELATED_TARGET, 8, 4, seed=1, id_prefix="tr"))
    _write_jsonl(root / "dev.jsonl", generate_corpus(RELATED_TARGET, 3, 4, seed=2, id_prefix="dv"))
    _write_jsonl(root / "test.jsonl", generate_corpus(RELATED_TARGET, 4, 4, seed=3, id_prefix="te"))
    _write_jsonl(root / "src.jsonl", generate_corpus(RELATED_SOURCE, 8, 4, seed=4, id_prefix="s"))
    (root / "unl.txt").write_text("\n".join(d.text for d in unlabeled_texts(RELATED_TARGET, 20, 4, seed=5)))
    cfg = {
        "experiment": "tgt", "seed": 1, "output_dir": "runs",
        "data": {"train": "train.jsonl", "dev": "dev.jsonl", "test": "test.jsonl"},
        "tokenizer": {"vocab": "runs/bpe/vocab.txt", "vocab_size": 400,
                      "texts": ["unl.txt", "train.jsonl", "src.jsonl"]},
        "encoder": TINY_ENCODER,
        "hyper": {"learning_rate": 0.01, "batch_size": 4, "epochs": 2},
    }
    (root / "cfg.json").write_text(json.dumps(cfg, indent=1))
    assert main(["bpe-train", "-c", str(root / "cfg.json"), "--set", "experiment=bpe"]) == 0
    return root


def run(ws, *args):
    return main([args[0], "-c", str(ws / "cfg.json"), *args[1:]])


def test_evaluate_identical_files(ws, capsys, tmp_path):
    gold = str(ws / "test.jsonl")
    assert main(["evaluate", "--gold", gold, "--pred", gold, "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["f1"] == 1.0
    assert "manifest.json" in os.listdir(tmp_path)
    assert "1.0000" in capsys.readouterr().out


def test_evaluate_per_type_and_significance(ws, tmp_path):
    gold = str(ws / "test.jsonl")
    assert main(["evaluate", "--gold", gold, "--pred", gold, "--pred-b", gold, "--per-type",
                 "--iterations", "1000", "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["significance"]["p_value"] == 1.0
    assert set(report["per_type"]) == {"MED", "PROBLEM"}


def test_unknown_key_is_config_error(ws, capsys):
    assert run(ws, "train", "--set", "hyper.learning_rte=0.1") == 1
    assert "learning_rte" in capsys.readouterr().err


def test_unknown_key_in_file(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"hyper": {"learning_rte": 0.1}}')
    assert main(["train", "-c", str(tmp_path / "c.json")]) == 1
    assert "hyper.learning_rte" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{\n  "seed": 1,\n  oops\n}')
    assert main(["train", "-c", str(tmp_path / "c.json")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_missing_required_setting(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{}")
    assert main(["train", "-c", str(tmp_path / "c.json")]) == 1
    assert "data.train" in capsys.readouterr().err


def test_bad_split_mode(ws, capsys):
    assert run(ws, "make-splits", "--set", "split=random:1") == 1


def test_runtime_failure_exit_code(ws, capsys):
    assert run(ws, "make-splits", "--set", "data.train=missing.jsonl", "--set", "experiment=x") == 2


def test_make_splits(ws):
    assert run(ws, "make-splits", "--set", "split=random:5", "--set", "data.test=null",
               "--set", "experiment=splits") == 0
    plans = json.loads((ws / "runs/splits/splits.json").read_text())["plans"]
    assert len(plans) == 5
    assert sorted(d for p in plans for d in p["dev"]) == sorted(plans[0]["train"] + plans[0]["dev"])


def test_train_layout_manifest_and_reexecution(ws, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)  # paths resolve against the config file, not the cwd
    assert run(ws, "train") == 0
    run_dir = ws / "runs/tgt/standard/1"
    assert {"model.ckpt", "record.json", "manifest.json", "test_predictions.jsonl"} <= set(os.listdir(run_dir))
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["seed"] == 1 and os.path.isabs(manifest["data"]["train"])
    assert manifest["run"]["plan"]["provenance"] == {"mode": "standard"}
    # the manifest is a config: re-run it into another directory
    assert main(["train", "-c", str(run_dir / "manifest.json"), "--set", f"output_dir={tmp_path / 'again'}"]) == 0
    again = tmp_path / "again/tgt/standard/1"
    for name in ("model.ckpt", "record.json", "test_predictions.jsonl"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_random_splits_train_and_ensemble(ws):
    assert run(ws, "train", "--set", "split=random:3", "--set", "experiment=rnd", "--set", "hyper.epochs=1") == 0
    out = ws / "runs/rnd"
    summary = json.loads((out / "summary.json").read_text())
    assert [r["plan"] for r in summary["runs"]] == ["random-0of3", "random-1of3", "random-2of3"]
    assert summary["median"]["plan"] in {r["plan"] for r in summary["runs"]}
    assert (out / "ensemble_predictions.jsonl").exists()


def test_worker_pool_matches_serial(ws, monkeypatch):
    args = ("train", "--set", "split=random:2", "--set", "hyper.epochs=1")
    assert run(ws, *args, "--set", "experiment=serial") == 0
    monkeypatch.setenv("CLINSEQ_WORKERS", "2")
    assert run(ws, *args, "--set", "experiment=pooled") == 0
    for plan in ("random-0of2", "random-1of2"):
        a = (ws / f"runs/serial/{plan}/1/model.ckpt").read_bytes()
        b = (ws / f"runs/pooled/{plan}/1/model.ckpt").read_bytes()
        assert a == b


def test_bad_worker_count(ws, monkeypatch):
    monkeypatch.setenv("CLINSEQ_WORKERS", "zero")
    assert run(ws, "train", "--set", "experiment=w") == 1


def test_ensemble_command(ws, tmp_path):
    gold = str(ws / "test.jsonl")
    assert main(["ensemble", "--pred", gold, "--pred", gold, "--out-dir", str(tmp_path)]) == 0
    assert main(["evaluate", "--gold", gold, "--pred", str(tmp_path / "ensemble_predictions.jsonl"),
                 "--out-dir", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev/report.json").read_text())["f1"] == 1.0


def test_predict_does_not_need_labels(ws, tmp_path):
    assert run(ws, "train", "--set", "experiment=p0", "--set", "hyper.epochs=1") == 0
    text_only = tmp_path / "docs.txt"
    text_only.write_text("ke ta bimoto da . pi runuga ku mubabi .\n")
    assert run(ws, "predict", "--set", "experiment=p1", "--set", "predict.model=runs/p0/standard/1/model.ckpt",
               "--set", f"predict.input={text_only}") == 0
    lines = (ws / "runs/p1/predictions.jsonl").read_text().splitlines()
    assert [json.loads(x)["id"] for x in lines] == ["line0"]


def test_pretrain_and_transfer(ws):
    assert run(ws, "pretrain", "--set", "experiment=pre", "--set", 'pretrain.texts=["unl.txt"]',
               "--set", "pretrain.epochs=1") == 0
    assert (ws / "runs/pre/encoder.ckpt").exists()
    assert run(ws, "train", "--set", "experiment=from-pre", "--set", "encoder.init=runs/pre/encoder.ckpt",
               "--set", "hyper.epochs=1") == 0
    src = ("--set", "data.train=src.jsonl", "--set", "data.dev=null", "--set", "data.test=null")
    assert run(ws, "train", *src, "--set", "experiment=src", "--set", "split=random:3",
               "--set", "hyper.epochs=1") == 0
    assert run(ws, "transfer", "--set", "experiment=xfer", "--set", "transfer.source=runs/src",
               "--set", "hyper.epochs=1") == 0
    manifest = json.loads((ws / "runs/xfer/standard/1/manifest.json").read_text())
    median = json.loads((ws / "runs/src/summary.json").read_text())["median"]["run_dir"]
    assert manifest["run"]["source"].endswith(f"{median}/model.ckpt")


def test_transfer_requires_source(ws, capsys):
    assert run(ws, "transfer", "--set", "experiment=x") == 1
    assert "transfer.source" in capsys.readouterr().err


def test_rank_sources_report(ws):
    assert run(ws, "train", "--set", "experiment=ref", "--set", "hyper.epochs=1") == 0
    ref = "runs/ref/standard/1/model.ckpt"
    assert run(ws, "rank-sources", "--set", "experiment=rank", "--set", f"transfer.reference={ref}",
               "--set", json.dumps({"a": ref}).join(["transfer.sources=", ""])) == 0
    text = (ws / "runs/rank/ranking.json").read_text()
    ranking = json.loads(text)
    assert ranking == [{"task": "a", "score": 1.0}]
    assert '"score": 1.0' in text


def test_lowres_sweep_single_cell_and_determinism(ws, tmp_path):
    args = ("lowres-sweep", "--set", "budgets=[10]", "--set", "hyper.epochs=2")
    assert run(ws, *args, "--set", "experiment=sw1") == 0
    table = json.loads((ws / "runs/sw1/results.json").read_text())
    assert table["budgets"] == [10] and [r["setting"] for r in table["rows"]] == ["no-transfer"]
    assert len(table["rows"][0]["f1"]) == 1
    assert "# training sentences" in (ws / "runs/sw1/results.txt").read_text()
    manifest = ws / "runs/sw1/manifest.json"
    assert main(["lowres-sweep", "-c", str(manifest), "--set", f"output_dir={tmp_path}"]) == 0
    for name in ("results.json", "results.txt"):
        assert (tmp_path / "sw1" / name).read_bytes() == (ws / "runs/sw1" / name).read_bytes()


def test_lowres_sweep_records_failed_cell(ws, tmp_path):
    # a source with a different vocabulary size cannot be transplanted
    other = {**TINY_ENCODER}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "experiment": "badsrc", "seed": 0, "output_dir": str(tmp_path),
        "data": {"train": str(ws / "src.jsonl")}, "split": "all_data",
        "tokenizer": {"vocab": str(tmp_path / "v/vocab.txt"), "vocab_size": 120, "texts": [str(ws / "src.jsonl")]},
        "encoder": other, "hyper": {"epochs": 1},
    }))
    assert main(["bpe-train", "-c", str(bad), "--set", "experiment=v"]) == 0
    assert main(["train", "-c", str(bad)]) == 0
    assert run(ws, "lowres-sweep", "--set", "experiment=sw2", "--set", "budgets=[10]", "--set", "hyper.epochs=1",
               "--set", json.dumps({"bad": str(tmp_path / "badsrc")}).join(["transfer.sources=", ""])) == 0
    table = json.loads((ws / "runs/sw2/results.json").read_text())
    rows = {r["setting"]: r["f1"] for r in table["rows"]}
    assert rows["bad"] == [None] and rows["no-transfer"][0] is not None
    assert table["failures"][0]["setting"] == "bad"
    assert "failed" in (ws / "runs/sw2/results.txt").read_text()


@pytest.mark.slow
def test_lowres_sweep_standard_budgets(tmp_path):
    _write_jsonl(tmp_path / "train.jsonl", generate_corpus(RELATED_TARGET, 1520, 5, seed=1, id_prefix="tr"))
    _write_jsonl(tmp_path / "test.jsonl", generate_corpus(RELATED_TARGET, 4, 4, seed=3, id_prefix="te"))
    cfg = {
        "experiment": "budgets", "split": "all_data",
        "data": {"train": "train.jsonl", "test": "test.jsonl"},
        "tokenizer": {"vocab": "v/vocab.txt", "vocab_size": 300, "texts": ["test.jsonl"], "context_size": 8},
        "encoder": {**TINY_ENCODER, "model_dim": 8, "feedforward_dim": 16, "max_positions": 64},
        "hyper": {"learning_rate": 0.01, "batch_size": 64, "epochs": 1},
        "budgets": [250, 500, 1000, 2500, 7500],
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["bpe-train", "-c", str(tmp_path / "c.json"), "--set", "experiment=v", "--set", "output_dir=."]) == 0
    assert main(["lowres-sweep", "-c", str(tmp_path / "c.json")]) == 0
    out = tmp_path / "runs/budgets"
    assert sorted(os.listdir(out / "no-transfer")) == sorted(
        f"all_data-first{b}" for b in (250, 500, 1000, 2500, 7500))
    table = json.loads((out / "results.json").read_text())
    assert table["budgets"] == [250, 500, 1000, 2500, 7500] and not table["failures"]
    header = (out / "results.txt").read_text().splitlines()[0].split()
    assert header[-5:] == ["250", "500", "1000", "2500", "7500"]
