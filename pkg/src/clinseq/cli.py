"""Command-line front end: config-driven, reproducible experiment pipelines.

Every subcommand that writes artifacts leaves a ``manifest.json`` next to them.
A manifest is itself a valid config (absolute paths, explicit seed), so
``clinseq <command> --config manifest.json`` re-executes the run.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import re
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

logger = logging.getLogger("clinseq")

COMMANDS = (
    "bpe-train", "pretrain", "train", "predict", "evaluate", "ensemble",
    "transfer", "rank-sources", "lowres-sweep", "make-splits",
)
NO_TRANSFER = "no-transfer"


class ConfigError(Exception):
    """Invalid or incomplete configuration (exit status 1)."""


# ---------------------------------------------------------------- schema


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    format: Literal["auto", "conll", "jsonl", "standoff", "text"] = "auto"
    scheme: Literal["BIO", "BIOSE"] = "BIOSE"  # tag scheme of CoNLL input files
    token_column: int = 0


class TokenizerConfig(_Section):
    vocab: str | None = None
    vocab_size: int = Field(2000, ge=6)
    texts: list[str] = []
    context_size: int = Field(100, ge=0)


class EncoderSection(_Section):
    init: str | None = None
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    feedforward_dim: int = 128
    max_positions: int = 512
    dropout_rate: float = 0.1


class PretrainConfig(_Section):
    texts: list[str] = []
    epochs: int | None = 3
    steps: int | None = None
    learning_rate: float = 1e-3
    batch_size: int = 16
    seq_len: int = 128
    weight_decay: float = 0.01


class HyperConfig(_Section):
    learning_rate: float = Field(3e-4, ge=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(20, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    selection_metric: Literal["dev_f1", "train_loss"] | None = None
    patience: int | None = None


class AblationConfig(_Section):
    scheme: Literal["BIO", "BIOSE"] = "BIOSE"
    crf: bool = True
    context: bool = True
    unit: Literal["subword", "word"] = "subword"
    constrained_decode: bool = True
    constrained_training: bool = False


class TransferConfig(_Section):
    source: str | None = None
    sources: dict[str, str] = {}
    reference: str | None = None
    selection: Literal["median", "best"] = "median"


class PredictConfig(_Section):
    model: str | None = None
    input: str | None = None


class ExperimentConfig(_Section):
    command: str | None = None
    experiment: str = "default"
    seed: int = 0
    output_dir: str = "runs"
    split: str = "standard"
    train_sentences: int | None = Field(None, ge=1)
    budgets: list[int] = []
    ensemble_threshold: float = Field(0.5, ge=0, lt=1)
    data: DataConfig = DataConfig()
    tokenizer: TokenizerConfig = TokenizerConfig()
    encoder: EncoderSection = EncoderSection()
    pretrain: PretrainConfig = PretrainConfig()
    hyper: HyperConfig = HyperConfig()
    ablation: AblationConfig = AblationConfig()
    transfer: TransferConfig = TransferConfig()
    predict: PredictConfig = PredictConfig()
    # provenance written into manifests (plan, inputs, ...); informational on input
    run: dict | None = None

    @field_validator("split")
    @classmethod
    def _split_mode(cls, v: str) -> str:
        if v in ("standard", "all_data") or re.fullmatch(r"random:([2-9]|[1-9]\d+)", v):
            return v
        raise ValueError("split must be 'standard', 'all_data' or 'random:<n>' with n >= 2")

    @field_validator("budgets")
    @classmethod
    def _budgets(cls, v: list[int]) -> list[int]:
        if any(b < 1 for b in v) or len(set(v)) != len(v):
            raise ValueError("budgets must be distinct positive sentence counts")
        return sorted(v)


def _path_fields(cfg: ExperimentConfig):
    """(section, attribute) pairs holding filesystem paths."""
    return [
        (cfg, "output_dir"), (cfg.data, "train"), (cfg.data, "dev"), (cfg.data, "test"),
        (cfg.tokenizer, "vocab"), (cfg.encoder, "init"), (cfg.transfer, "source"),
        (cfg.transfer, "reference"), (cfg.predict, "model"), (cfg.predict, "input"),
    ]


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    def fix(p):
        return p if p is None else str((base / p).resolve())

    for obj, attr in _path_fields(cfg):
        setattr(obj, attr, fix(getattr(obj, attr)))
    cfg.tokenizer.texts = [fix(p) for p in cfg.tokenizer.texts]
    cfg.pretrain.texts = [fix(p) for p in cfg.pretrain.texts]
    cfg.transfer.sources = {k: fix(v) for k, v in cfg.transfer.sources.items()}
    return cfg


def _apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, value = item.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = child
    node[parts[-1]] = parsed


def load_config(path: str | None, overrides: list[str], command: str) -> ExperimentConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        base = p.resolve().parent
    for item in overrides:
        _apply_override(raw, item)
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            where = ".".join(str(x) for x in err["loc"])
            msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
            lines.append(f"{where}: {msg}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None
    if cfg.command is not None and cfg.command != command:
        raise ConfigError(f"config was written for {cfg.command!r}, not {command!r}")
    cfg.command = command
    return _resolve_paths(cfg, base)


def _require(value, what: str):
    if value is None or value == [] or value == {}:
        raise ConfigError(f"missing required setting {what}")
    return value


# ---------------------------------------------------------------- io helpers


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
    os.replace(tmp, path)


def _json_bytes(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_manifest(directory: str | os.PathLike, cfg: ExperimentConfig, **run) -> None:
    data = cfg.model_dump(mode="json")
    data["run"] = run or None
    atomic_write(Path(directory) / "manifest.json", _json_bytes(data))


def _config_from_dict(data: dict) -> ExperimentConfig:
    return ExperimentConfig.model_validate(data)


def _infer_format(path: str, fmt: str) -> str:
    if fmt != "auto":
        return fmt
    if os.path.isdir(path):
        return "standoff"
    suffix = Path(path).suffix.lower()
    return {".jsonl": "jsonl", ".conll": "conll", ".bio": "conll", ".txt": "text"}.get(suffix, "conll")


def load_corpus(path: str, data: DataConfig, fmt: str | None = None):
    from .corpus import ConllConfig, Corpus, Document, load_documents_jsonl, read_conll, read_standoff, split_sentences

    fmt = _infer_format(path, fmt or data.format)
    if fmt == "jsonl":
        return load_documents_jsonl(Path(path).read_bytes())
    if fmt == "conll":
        return read_conll(Path(path).read_bytes(), ConllConfig(scheme=data.scheme, token_column=data.token_column))
    if fmt == "standoff":
        stats: Counter = Counter()
        docs = []
        for txt in sorted(Path(path).glob("*.txt")):
            ann = txt.with_suffix(".ann")
            ann_bytes = ann.read_bytes() if ann.exists() else b""
            docs.append(read_standoff(txt.read_bytes(), ann_bytes, txt.stem, stats))
        if stats["discontinuous"]:
            logger.warning("%s: skipped %d discontinuous annotations", path, stats["discontinuous"])
        return Corpus(tuple(docs))
    # plain text: one document per nonempty line
    docs = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if line:
            docs.append(Document(f"line{i}", line, tuple(split_sentences(line)), ()))
    return Corpus(tuple(docs))


def _unlabeled(corpus):
    from .corpus import Corpus

    return Corpus(tuple(d.with_spans(()) for d in corpus.documents))


def _load_splits(cfg: ExperimentConfig):
    """(train, dev, test) corpora; test is returned without its labels."""
    from .corpus import Corpus

    train = load_corpus(_require(cfg.data.train, "data.train"), cfg.data)
    dev = load_corpus(cfg.data.dev, cfg.data) if cfg.data.dev else Corpus(())
    test = _unlabeled(load_corpus(cfg.data.test, cfg.data)) if cfg.data.test else None
    seen: set[str] = set()
    for part in (train, dev, test):
        for d in part.documents if part else ():
            if d.id in seen:
                raise ValueError(f"document id {d.id!r} occurs in more than one split")
            seen.add(d.id)
    return train, dev, test


def _vocab(cfg: ExperimentConfig):
    from .subword import Vocabulary

    return Vocabulary.load(_require(cfg.tokenizer.vocab, "tokenizer.vocab"))


def _ablation(cfg: ExperimentConfig):
    from .tagger import Ablation

    return Ablation(context_size=cfg.tokenizer.context_size, **cfg.ablation.model_dump())


def _hyper(cfg: ExperimentConfig):
    from .train import Hyperparams

    return Hyperparams(seed=cfg.seed, **cfg.hyper.model_dump())


def _encoder_config(cfg: ExperimentConfig, vocab_size: int):
    from .encoder import EncoderConfig

    enc = cfg.encoder.model_dump()
    enc.pop("init")
    return EncoderConfig(vocab_size=vocab_size, seed=cfg.seed, **enc)


def _plans(cfg: ExperimentConfig, train, dev, test):
    from .train import all_data_plan, make_random_splits, standard_plan

    tr, dv = [d.id for d in train.documents], [d.id for d in dev.documents]
    te = [d.id for d in test.documents] if test else []
    if cfg.split == "standard":
        return [standard_plan(tr, dv, te)]
    if cfg.split == "all_data":
        return [all_data_plan(tr, dv, te)]
    n = int(cfg.split.split(":")[1])
    return make_random_splits(tr, dv, n, cfg.seed, te)


def _worker_count() -> int:
    raw = os.environ.get("CLINSEQ_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CLINSEQ_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CLINSEQ_WORKERS must be >= 1")
    return n


def _pool_map(fn, jobs: list) -> list:
    workers = min(_worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, jobs))


def _resolve_source(path: str, selection: str) -> str:
    """A checkpoint file, or an experiment directory whose summary picks a run."""
    p = Path(path)
    if p.is_dir():
        summary = json.loads((p / "summary.json").read_text(encoding="utf-8"))
        return str(p / summary[selection]["run_dir"] / "model.ckpt")
    return str(p)


# ---------------------------------------------------------------- run jobs


def _run_training_job(job: dict) -> dict:
    """Train one plan; write checkpoint, record, test predictions and manifest.

    Module-level so that it can run in a worker process."""
    import torch

    from .corpus import Corpus, TagScheme, dump_predictions_jsonl
    from .encoder import load_checkpoint
    from .train import SplitPlan, low_resource_subset, save_run, train_tagger
    from .transfer import transplant

    torch.set_num_threads(1)
    cfg = _config_from_dict(job["config"])
    run_dir = Path(job["run_dir"])
    try:
        train, dev, test = _load_splits(cfg)
        vocab = _vocab(cfg)
        corpus = Corpus(train.documents + dev.documents)
        plan = SplitPlan.from_dict(job["plan"])
        if job.get("budget") is not None:
            plan = low_resource_subset(plan, job["budget"], corpus)
        ablation = _ablation(cfg)
        labels = tuple(sorted(corpus.label_set))
        scheme = TagScheme(ablation.scheme, labels)
        source = job.get("source")
        if source:
            init = transplant(source, scheme, seed=cfg.seed, ablation=ablation, vocab_size=len(vocab))
        elif cfg.encoder.init:
            init = load_checkpoint(cfg.encoder.init)
            init = getattr(init, "encoder", init)
        else:
            init = _encoder_config(cfg, len(vocab))
        record = train_tagger(init, plan, corpus, vocab, _hyper(cfg), ablation, label_set=labels)
        save_run(record, run_dir)
        if test is not None:
            pred = record.tagger.predict_documents(test.documents, vocab, model_id=plan.name)
            atomic_write(run_dir / "test_predictions.jsonl", dump_predictions_jsonl(pred))
        write_manifest(run_dir, cfg, plan=plan.to_dict(), source=source, budget=job.get("budget"))
        return {
            "plan": plan.name, "run_dir": job["rel_dir"], "seed": cfg.seed,
            "selected_epoch": record.selected_epoch,
            "score": round(record.selection_score, 6), "error": None,
        }
    except Exception as exc:  # reported to the caller, which decides the exit status
        logger.exception("run %s failed", job["rel_dir"])
        return {"plan": job["rel_dir"], "run_dir": job["rel_dir"], "error": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------- commands


def cmd_bpe_train(cfg: ExperimentConfig, args) -> int:
    from .subword import train_bpe

    texts = []
    for path in _require(cfg.tokenizer.texts or [p for p in (cfg.data.train,) if p], "tokenizer.texts"):
        texts.extend(d.text for d in load_corpus(path, cfg.data).documents)
    vocab = train_bpe(texts, cfg.tokenizer.vocab_size, seed=cfg.seed)
    out = Path(cfg.output_dir) / cfg.experiment
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    write_manifest(out, cfg)
    print(f"vocabulary of {len(vocab)} tokens written to {out / 'vocab.txt'}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    from .encoder import MlmSchedule, init_encoder, load_checkpoint, pretrain_mlm, save_checkpoint
    from .subword import segment_document

    vocab = _vocab(cfg)
    seqs = []
    for path in _require(cfg.pretrain.texts, "pretrain.texts"):
        seqs.extend(segment_document(d, vocab) for d in load_corpus(path, cfg.data).documents)
    if cfg.encoder.init:
        model = load_checkpoint(cfg.encoder.init)
        model = getattr(model, "encoder", model)
    else:
        model = init_encoder(_encoder_config(cfg, len(vocab)))
    p = cfg.pretrain
    schedule = MlmSchedule(p.epochs, p.steps, p.learning_rate, p.batch_size, p.seq_len, p.weight_decay, cfg.seed)
    model, hist = pretrain_mlm(model, seqs, schedule)
    out = Path(cfg.output_dir) / cfg.experiment
    save_checkpoint(model, out / "encoder.ckpt")
    atomic_write(out / "history.json", _json_bytes(
        {"epoch_losses": [round(x, 6) for x in hist.epoch_losses], "steps": hist.steps}))
    write_manifest(out, cfg)
    print(f"encoder written to {out / 'encoder.ckpt'} after {hist.steps} steps")
    return 0


def cmd_make_splits(cfg: ExperimentConfig, args) -> int:
    train, dev, test = _load_splits(cfg)
    plans = _plans(cfg, train, dev, test)
    out = Path(cfg.output_dir) / cfg.experiment
    atomic_write(out / "splits.json", _json_bytes({"plans": [p.to_dict() for p in plans]}))
    write_manifest(out, cfg)
    for p in plans:
        print(f"{p.name}: train={len(p.train_doc_ids)} dev={len(p.dev_doc_ids)} test={len(p.test_doc_ids)}")
    return 0


def _training_jobs(cfg: ExperimentConfig, source: str | None, experiment: str, budget: int | None) -> list[dict]:
    from .train import SplitPlan

    train, dev, test = _load_splits(cfg)
    jobs = []
    for plan in _plans(cfg, train, dev, test):
        name = plan.name if budget is None else SplitPlan.from_dict(
            {**plan.to_dict(), "train_sentence_limit": budget}).name
        rel = f"{name}/{cfg.seed}"
        jobs.append({
            "config": cfg.model_dump(mode="json"), "plan": plan.to_dict(), "budget": budget,
            "source": source, "run_dir": str(Path(cfg.output_dir) / experiment / rel), "rel_dir": rel,
        })
    return jobs


def _summarize(results: list[dict]) -> dict:
    ok = [r for r in results if r["error"] is None]
    summary = {"runs": results}
    if ok:
        ranked = sorted(range(len(ok)), key=lambda i: (ok[i]["score"], i))
        summary["best"] = ok[ranked[-1]]
        summary["median"] = ok[ranked[(len(ok) - 1) // 2]]
    return summary


def _ensemble_runs(out: Path, results: list[dict], threshold: float) -> None:
    from .corpus import dump_predictions_jsonl, load_predictions_jsonl
    from .ensemble import majority_vote

    files = [out / r["run_dir"] / "test_predictions.jsonl" for r in results if r["error"] is None]
    files = [f for f in files if f.exists()]
    if len(files) < 2:
        return
    preds = [load_predictions_jsonl(f.read_bytes(), str(f.parent)) for f in files]
    atomic_write(out / "ensemble_predictions.jsonl", dump_predictions_jsonl(majority_vote(preds, threshold)))


def cmd_train(cfg: ExperimentConfig, args, source: str | None = None) -> int:
    if source is None and cfg.transfer.source:
        source = _resolve_source(cfg.transfer.source, cfg.transfer.selection)
    _require(cfg.data.train, "data.train")
    _require(cfg.tokenizer.vocab, "tokenizer.vocab")
    jobs = _training_jobs(cfg, source, cfg.experiment, cfg.train_sentences)
    results = _pool_map(_run_training_job, jobs)
    out = Path(cfg.output_dir) / cfg.experiment
    _ensemble_runs(out, results, cfg.ensemble_threshold)
    atomic_write(out / "summary.json", _json_bytes(_summarize(results)))
    write_manifest(out, cfg)
    for r in results:
        status = r["error"] or f"selected epoch {r['selected_epoch']}, score {r['score']:.4f}"
        print(f"{r['run_dir']}: {status}")
    return 2 if any(r["error"] for r in results) else 0


def cmd_transfer(cfg: ExperimentConfig, args) -> int:
    source = _resolve_source(_require(cfg.transfer.source, "transfer.source"), cfg.transfer.selection)
    return cmd_train(cfg, args, source=source)


def cmd_predict(cfg: ExperimentConfig, args) -> int:
    from .corpus import dump_predictions_jsonl
    from .transfer import _as_tagger

    model = _as_tagger(_require(cfg.predict.model, "predict.model"))
    source = _require(cfg.predict.input or cfg.data.test, "predict.input")
    docs = _unlabeled(load_corpus(source, cfg.data)).documents
    pred = model.predict_documents(docs, _vocab(cfg))
    out = Path(cfg.output_dir) / cfg.experiment
    atomic_write(out / "predictions.jsonl", dump_predictions_jsonl(pred))
    write_manifest(out, cfg)
    print(f"predictions for {len(docs)} documents written to {out / 'predictions.jsonl'}")
    return 0


def _load_spans(path: str, model_id: str):
    """Span layer of a JSONL (documents or predictions) file or a standoff directory."""
    from .corpus import PredictionSet, load_predictions_jsonl

    if os.path.isdir(path):
        return PredictionSet.from_corpus(load_corpus(path, DataConfig(), "standoff"), model_id)
    if _infer_format(path, "auto") == "conll":
        return PredictionSet.from_corpus(load_corpus(path, DataConfig(), "conll"), model_id)
    return load_predictions_jsonl(Path(path).read_bytes(), model_id)


def evaluate_files(gold: str, pred: str):
    from .evaluation import strict_micro_f1

    return strict_micro_f1(_load_spans(gold, "gold"), _load_spans(pred, "pred"))


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    from .evaluation import significance_test

    if not args.gold or not args.pred:
        raise ConfigError("evaluate needs --gold and --pred")
    report = evaluate_files(args.gold, args.pred)
    result = report.to_dict(per_type=args.per_type)
    print(report.table(per_type=args.per_type))
    if args.pred_b:
        gold = _load_spans(args.gold, "gold")
        sig = significance_test(gold, _load_spans(args.pred, "a"), _load_spans(args.pred_b, "b"),
                                iterations=args.iterations, seed=cfg.seed)
        result["significance"] = {
            "p_value": round(sig.p_value, 6), "code": sig.code, "iterations": sig.iterations,
            "seed": sig.seed, "delta_f1": round(sig.observed_delta, 6),
        }
        print(f"paired randomization: |dF1| = {sig.observed_delta:.4f}, p = {sig.p_value:.4f} {sig.code}")
    if args.out_dir:
        out = Path(args.out_dir)
        atomic_write(out / "report.json", _json_bytes(result))
        write_manifest(out, cfg, inputs={"gold": os.path.abspath(args.gold), "pred": os.path.abspath(args.pred)})
    return 0


def cmd_ensemble(cfg: ExperimentConfig, args) -> int:
    from .corpus import dump_predictions_jsonl
    from .ensemble import majority_vote

    if not args.pred:
        raise ConfigError("ensemble needs at least one --pred")
    preds = [_load_spans(p, f"m{i}") for i, p in enumerate(args.pred)]
    merged = majority_vote(preds, cfg.ensemble_threshold)
    out = Path(args.out_dir) if args.out_dir else Path(cfg.output_dir) / cfg.experiment
    atomic_write(out / "ensemble_predictions.jsonl", dump_predictions_jsonl(merged))
    write_manifest(out, cfg, inputs=[os.path.abspath(p) for p in args.pred])
    print(f"majority vote over {len(preds)} prediction sets written to {out / 'ensemble_predictions.jsonl'}")
    return 0


def _probe(cfg: ExperimentConfig, budget: int | None):
    from .corpus import Corpus
    from .train import low_resource_subset

    train, dev, test = _load_splits(cfg)
    corpus = Corpus(train.documents + dev.documents)
    plan = _plans(cfg, train, dev, test)[0]
    if budget is not None:
        plan = low_resource_subset(plan, budget, corpus)
    return plan.train_documents(corpus)


def _ranking(cfg: ExperimentConfig, reference: str, budget: int | None) -> list[dict]:
    from .transfer import SourceCandidate, rank_sources

    cands = [SourceCandidate(name, _resolve_source(path, cfg.transfer.selection))
             for name, path in cfg.transfer.sources.items()]
    ranking = rank_sources(_probe(cfg, budget), reference, cands, _vocab(cfg))
    return [{"task": t, "score": round(s, 6)} for t, s in ranking]


def cmd_rank_sources(cfg: ExperimentConfig, args) -> int:
    _require(cfg.transfer.sources, "transfer.sources")
    ref = _resolve_source(_require(cfg.transfer.reference, "transfer.reference"), cfg.transfer.selection)
    ranking = _ranking(cfg, ref, cfg.train_sentences)
    out = Path(cfg.output_dir) / cfg.experiment
    atomic_write(out / "ranking.json", json.dumps(ranking, indent=2) + "\n")
    write_manifest(out, cfg)
    for row in ranking:
        print(f"{row['task']}\t{row['score']:.6f}")
    return 0


def render_sweep_table(table: dict) -> str:
    budgets = table["budgets"]
    head = ["# training sentences"] + [str(b) for b in budgets]
    rows = [head]
    for row in table["rows"]:
        mark = " *" if row["setting"] == table.get("predicted_source") else ""
        cells = ["failed" if f is None else f"{100 * f:.2f}" for f in row["f1"]]
        rows.append([row["setting"] + mark] + cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    if table.get("predicted_source"):
        lines.append("* predicted transfer source")
    return "\n".join(lines) + "\n"


def cmd_lowres_sweep(cfg: ExperimentConfig, args) -> int:
    budgets = _require(cfg.budgets, "budgets")
    test_path = _require(cfg.data.test, "data.test")
    if cfg.split.startswith("random"):
        raise ConfigError("lowres-sweep uses a single split; set split to 'standard' or 'all_data'")
    settings = [NO_TRANSFER] + sorted(cfg.transfer.sources)
    sources = {name: _resolve_source(p, cfg.transfer.selection) for name, p in cfg.transfer.sources.items()}
    jobs, keys = [], []
    for setting in settings:
        for b in budgets:
            exp = f"{cfg.experiment}/{setting}"
            for job in _training_jobs(cfg, sources.get(setting), exp, b):
                job["rel_dir"] = f"{setting}/{job['rel_dir']}"
                jobs.append(job)
                keys.append((setting, b))
    results = _pool_map(_run_training_job, jobs)
    out = Path(cfg.output_dir) / cfg.experiment
    f1 = {}
    failures = []
    for (setting, b), res in zip(keys, results):
        if res["error"] is not None:
            failures.append({"setting": setting, "budget": b, "error": res["error"]})
            f1[setting, b] = None
            continue
        try:
            report = evaluate_files(test_path, str(out / res["run_dir"] / "test_predictions.jsonl"))
            f1[setting, b] = round(report.f1, 6)
        except Exception as exc:
            failures.append({"setting": setting, "budget": b, "error": f"{type(exc).__name__}: {exc}"})
            f1[setting, b] = None
    predicted = None
    ref_run = next((r for (s, b), r in zip(keys, results) if s == NO_TRANSFER and b == budgets[0]), None)
    if sources and ref_run is not None and ref_run["error"] is None:
        try:
            ranking = _ranking(cfg, str(out / ref_run["run_dir"] / "model.ckpt"), budgets[0])
            predicted = ranking[0]["task"]
        except Exception as exc:
            failures.append({"setting": "rank-sources", "budget": budgets[0], "error": f"{type(exc).__name__}: {exc}"})
            ranking = None
    else:
        ranking = None
    table = {
        "budgets": budgets,
        "rows": [{"setting": s, "f1": [f1[s, b] for b in budgets]} for s in settings],
        "predicted_source": predicted,
        "ranking": ranking,
        "failures": failures,
    }
    atomic_write(out / "results.json", _json_bytes(table))
    text = render_sweep_table(table)
    atomic_write(out / "results.txt", text)
    write_manifest(out, cfg)
    print(text, end="")
    for f in failures:
        print(f"failed cell {f['setting']} @ {f['budget']}: {f['error']}", file=sys.stderr)
    return 0 if any(v is not None for v in f1.values()) else 2


HANDLERS = {
    "bpe-train": cmd_bpe_train,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "transfer": cmd_transfer,
    "rank-sources": cmd_rank_sources,
    "lowres-sweep": cmd_lowres_sweep,
    "make-splits": cmd_make_splits,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinseq", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="JSON config (or a manifest.json to re-execute)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config value by dotted path; VALUE is parsed as JSON when possible")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        if name == "evaluate":
            p.add_argument("--gold")
            p.add_argument("--pred")
            p.add_argument("--pred-b", help="second system for a paired significance test")
            p.add_argument("--iterations", type=int, default=10000)
            p.add_argument("--per-type", action="store_true")
            p.add_argument("--out-dir")
        if name == "ensemble":
            p.add_argument("--pred", action="append", default=[])
            p.add_argument("--out-dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides, args.command)
        # a single intra-op thread keeps floating-point reductions reproducible
        import torch

        torch.set_num_threads(1)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
