"""Split planning, low-resource subsetting, the fine-tuning loop and model selection."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .corpus import Corpus, Document, PredictionSet, TagScheme
from .crf import nll_and_grads, softmax_nll_and_grads
from .encoder import EncoderConfig, EncoderModel, init_encoder, load_checkpoint, save_checkpoint
from .evaluation import strict_micro_f1
from .subword import Vocabulary
from .tagger import Ablation, Instance, Tagger, featurize

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class SplitPlan:
    train_doc_ids: tuple[str, ...]
    dev_doc_ids: tuple[str, ...]
    test_doc_ids: tuple[str, ...]
    provenance: dict = field(default_factory=lambda: {"mode": "standard"}, hash=False, compare=True)
    train_sentence_limit: int | None = None

    def __post_init__(self):
        for name in ("train_doc_ids", "dev_doc_ids", "test_doc_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        tr, dv, te = set(self.train_doc_ids), set(self.dev_doc_ids), set(self.test_doc_ids)
        if tr & dv or tr & te or dv & te:
            raise ValueError("train, dev and test document ids must be disjoint")

    @property
    def name(self) -> str:
        prov = self.provenance
        if prov["mode"] == "random":
            base = f"random-{prov['part']}of{prov['n']}"
        else:
            base = prov["mode"]
        if self.train_sentence_limit is not None:
            base += f"-first{self.train_sentence_limit}"
        return base

    def train_documents(self, corpus: Corpus) -> list[Document]:
        """Training documents in corpus order, cut to the sentence budget if one is set."""
        wanted = set(self.train_doc_ids)
        out, budget = [], self.train_sentence_limit
        for doc in corpus.documents:
            if doc.id not in wanted:
                continue
            if budget is not None:
                if budget <= 0:
                    break
                doc = doc.truncated(budget)
                budget -= len(doc.sentences)
            out.append(doc)
        return out

    def dev_documents(self, corpus: Corpus) -> list[Document]:
        wanted = set(self.dev_doc_ids)
        return [d for d in corpus.documents if d.id in wanted]

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_doc_ids), "dev": list(self.dev_doc_ids), "test": list(self.test_doc_ids),
            "provenance": self.provenance, "train_sentence_limit": self.train_sentence_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        return cls(data["train"], data["dev"], data["test"], data["provenance"], data.get("train_sentence_limit"))


def standard_plan(train_ids, dev_ids, test_ids=()) -> SplitPlan:
    return SplitPlan(tuple(train_ids), tuple(dev_ids), tuple(test_ids), {"mode": "standard"})


def all_data_plan(train_ids, dev_ids, test_ids=()) -> SplitPlan:
    return SplitPlan(tuple(train_ids) + tuple(dev_ids), (), tuple(test_ids), {"mode": "all_data"})


def make_random_splits(train_ids, dev_ids, n: int, seed: int, test_ids=()) -> list[SplitPlan]:
    """Pool train+dev documents, shuffle, cut into ``n`` near-equal parts; plan ``i``
    validates on part ``i`` and trains on the rest."""
    if n < 2:
        raise ValueError("random splits need n >= 2")
    pool = list(train_ids) + list(dev_ids)
    if len(pool) < n:
        raise ValueError(f"{len(pool)} documents cannot be split into {n} parts")
    order = np.random.default_rng(seed).permutation(len(pool))
    parts = [[pool[j] for j in chunk] for chunk in np.array_split(order, n)]
    plans = []
    for i in range(n):
        train = [d for k, part in enumerate(parts) if k != i for d in part]
        plans.append(SplitPlan(
            tuple(train), tuple(parts[i]), tuple(test_ids),
            {"mode": "random", "part": i, "n": n, "seed": seed},
        ))
    return plans


def low_resource_subset(plan: SplitPlan, n_sentences: int, corpus: Corpus) -> SplitPlan:
    """Restrict training to the first ``n_sentences`` sentences, in corpus order, no shuffling.
    Dev and test are untouched."""
    if n_sentences < 1:
        raise ValueError("n_sentences must be >= 1")
    current = plan.train_documents(corpus)
    total = sum(len(d.sentences) for d in current)
    if n_sentences >= total:
        return plan
    kept, seen = [], 0
    for doc in current:
        if seen >= n_sentences:
            break
        kept.append(doc.id)
        seen += len(doc.sentences)
    return replace(plan, train_doc_ids=tuple(kept), train_sentence_limit=n_sentences)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    selection_metric: str | None = None  # "dev_f1" | "train_loss"; None picks by dev set presence
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate >= 0, batch_size >= 1 and epochs >= 1 required")
        if self.selection_metric not in (None, "dev_f1", "train_loss"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")


PAPER_HYPERPARAMS = Hyperparams(learning_rate=2.0e-5, batch_size=16, epochs=20)


@dataclass
class RunRecord:
    train_loss: list[float]
    dev_f1: list[float | None]
    selected_epoch: int
    seed: int
    provenance: dict
    selection_metric: str
    checkpoint: str | None = None
    tagger: Tagger | None = field(default=None, repr=False, compare=False)

    @property
    def selection_score(self) -> float:
        """Higher is better: dev F1, or negative train loss in all-data mode."""
        i = self.selected_epoch - 1
        if self.selection_metric == "dev_f1":
            return float(self.dev_f1[i])
        return -float(self.train_loss[i])

    def to_json(self) -> str:
        rnd = lambda x: None if x is None else round(float(x), 6)  # noqa: E731
        data = {
            "train_loss": [rnd(x) for x in self.train_loss],
            "dev_f1": [rnd(x) for x in self.dev_f1],
            "selected_epoch": self.selected_epoch,
            "seed": self.seed,
            "provenance": self.provenance,
            "selection_metric": self.selection_metric,
            "checkpoint": self.checkpoint,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _collect(docs: Sequence[Document], vocab, scheme, ablation, max_len) -> list[Instance]:
    out = []
    for doc in docs:
        out.extend(i for i in featurize(doc, vocab, scheme, ablation, True, max_len) if i.positions)
    return out


def resolve_init(init, scheme: TagScheme, ablation: Ablation, seed: int) -> Tagger:
    """A fresh tagger from an encoder, an encoder config, a checkpoint path or a tagger."""
    if isinstance(init, (str, os.PathLike)):
        init = load_checkpoint(init)
    if isinstance(init, EncoderConfig):
        init = init_encoder(init)
    if isinstance(init, Tagger):
        if init.scheme != scheme:
            raise ValueError(f"tagger labels {init.scheme} disagree with the task {scheme}")
        tagger = copy.deepcopy(init)
        tagger.ablation = ablation
        return tagger
    if isinstance(init, EncoderModel):
        return Tagger(copy.deepcopy(init), scheme, ablation, seed)
    raise TypeError(f"cannot initialize a tagger from {type(init).__name__}")


def train_tagger(
    init,
    plan: SplitPlan,
    corpus: Corpus,
    vocab: Vocabulary,
    hyper: Hyperparams = Hyperparams(),
    ablation: Ablation = Ablation(),
    label_set: Sequence[str] | None = None,
    checkpoint_path: str | os.PathLike | None = None,
) -> RunRecord:
    """Fine-tune a tagger on ``plan``; keeps the selected epoch's weights.

    Loss is the CRF NLL (or per-position softmax NLL without CRF) over focus
    positions, averaged over the sentences of a batch.
    """
    test = set(plan.test_doc_ids)
    train_docs = plan.train_documents(corpus)
    dev_docs = plan.dev_documents(corpus)
    if test & {d.id for d in train_docs} or test & {d.id for d in dev_docs}:
        raise ValueError("test documents leaked into training or validation")
    if not train_docs:
        raise ValueError("empty training set")
    if label_set is None:
        if isinstance(init, Tagger):
            label_set = init.scheme.label_set
        else:
            label_set = sorted({s.label for d in list(train_docs) + dev_docs for s in d.spans})
    scheme = TagScheme(ablation.scheme, tuple(label_set))
    unknown = {s.label for d in train_docs for s in d.spans} - set(scheme.label_set)
    if unknown:
        raise ValueError(f"training labels {sorted(unknown)} missing from the output head")

    metric = hyper.selection_metric or ("dev_f1" if dev_docs else "train_loss")
    if metric == "dev_f1" and not dev_docs:
        raise ValueError("dev-F1 selection needs a development set")

    torch.manual_seed(hyper.seed)
    tagger = resolve_init(init, scheme, ablation, hyper.seed)
    max_len = tagger.encoder.cfg.max_positions
    instances = _collect(train_docs, vocab, scheme, ablation, max_len)
    if not instances:
        raise ValueError("training documents produced no labeled positions")
    gold_dev = PredictionSet.from_corpus(dev_docs)

    rng = np.random.default_rng(hyper.seed)
    gen = torch.Generator().manual_seed(hyper.seed)
    opt = torch.optim.AdamW(
        tagger.parameters(), lr=hyper.learning_rate, betas=(hyper.beta1, hyper.beta2),
        eps=hyper.eps, weight_decay=hyper.weight_decay,
    )
    mask = tagger.mask if ablation.constrained_training else None
    train_loss: list[float] = []
    dev_f1: list[float | None] = []
    best_state, best_score, best_epoch, since_best = None, -math.inf, 0, 0
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        tagger.train()
        order = rng.permutation(len(instances))
        batch_losses = []
        for a in range(0, len(instances), hyper.batch_size):
            batch = [instances[i] for i in order[a : a + hyper.batch_size]]
            loss = _train_step(tagger, batch, gen, mask)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            opt.step()
            batch_losses.append(loss)
            step += 1
        train_loss.append(float(np.mean(batch_losses)))
        if dev_docs:
            pred = tagger.predict_documents(dev_docs, vocab)
            dev_f1.append(strict_micro_f1(gold_dev, pred).f1)
        else:
            dev_f1.append(None)
        score = dev_f1[-1] if metric == "dev_f1" else -train_loss[-1]
        if score > best_score:
            best_score, best_epoch, since_best = score, epoch, 0
            best_state = copy.deepcopy(tagger.state_dict())
        else:
            since_best += 1
        logger.info("epoch %d loss %.4f dev_f1 %s", epoch, train_loss[-1], dev_f1[-1])
        if hyper.patience is not None and since_best >= hyper.patience:
            break
    tagger.load_state_dict(best_state)
    tagger.eval()
    record = RunRecord(train_loss, dev_f1, best_epoch, hyper.seed, dict(plan.provenance), metric, tagger=tagger)
    if plan.train_sentence_limit is not None:
        record.provenance["train_sentence_limit"] = plan.train_sentence_limit
    if checkpoint_path is not None:
        save_checkpoint(tagger, checkpoint_path)
        record.checkpoint = os.path.basename(checkpoint_path)
    return record


def _train_step(tagger: Tagger, batch: list[Instance], gen, mask) -> float:
    for p in tagger.parameters():
        p.grad = None
    reps = tagger.represent(batch, gen)
    head = tagger.head_params()
    n = len(batch)
    total = 0.0
    head_grads = [np.zeros_like(x) for x in (head.W, head.b, head.T, head.start, head.end)]
    rep_grads = []
    for inst, r in zip(batch, reps):
        r64 = r.detach().double().numpy()
        if tagger.ablation.crf:
            nll, g = nll_and_grads(head, r64, inst.gold, mask)
        else:
            nll, g = softmax_nll_and_grads(head, r64, inst.gold)
        total += nll
        for acc, x in zip(head_grads, (g.W, g.b, g.T, g.start, g.end)):
            acc += x
        rep_grads.append(torch.from_numpy(g.reps / n).to(r.dtype))
    torch.autograd.backward(reps, rep_grads)
    for p, g in zip(tagger.head_tensors(), head_grads):
        p.grad = torch.from_numpy(g / n).to(p.dtype)
    return total / n


# ---------------------------------------------------------------- selection


def select_model(runs: Sequence[RunRecord], criterion: str = "median") -> RunRecord:
    """Best run, or the lower median (index floor((m-1)/2) of the ascending order)."""
    if not runs:
        raise ValueError("no runs to select from")
    ranked = sorted(range(len(runs)), key=lambda i: (runs[i].selection_score, i))
    if criterion == "best":
        return runs[ranked[-1]]
    if criterion == "median":
        return runs[ranked[(len(runs) - 1) // 2]]
    raise ValueError(f"unknown selection criterion {criterion!r}")


def save_run(record: RunRecord, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    if record.tagger is not None:
        save_checkpoint(record.tagger, os.path.join(directory, "model.ckpt"))
        record.checkpoint = "model.ckpt"
    tmp = os.path.join(directory, "record.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(record.to_json())
    os.replace(tmp, os.path.join(directory, "record.json"))
