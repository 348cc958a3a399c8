import numpy as np
import pytest
import torch

from clinseq.corpus import Corpus, PredictionSet, TagScheme
from clinseq.encoder import EncoderConfig, load_checkpoint, save_checkpoint
from clinseq.evaluation import strict_micro_f1
from clinseq.subword import segment_document, train_bpe
from clinseq.synthetic import RELATED_SOURCE, generate_corpus
from clinseq.tagger import Ablation, featurize, new_tagger
from clinseq.train import (
    Hyperparams,
    RunRecord,
    SplitPlan,
    all_data_plan,
    low_resource_subset,
    make_random_splits,
    select_model,
    standard_plan,
    train_tagger,
)


@pytest.fixture(scope="module")
def task():
    corpus = generate_corpus(RELATED_SOURCE, 12, 4, seed=5)
    vocab = train_bpe([d.text for d in corpus.documents], 400)
    cfg = EncoderConfig(len(vocab), 16, 2, 1, 32, 256, 0.0, seed=0)
    return corpus, vocab, cfg


def ids(corpus):
    return [d.id for d in corpus.documents]


# ---------------------------------------------------------------- plans


def test_random_splits_sizes_and_partition():
    docs = [f"d{i}" for i in range(100)]
    plans = make_random_splits(docs[:70], docs[70:], 5, seed=1, test_ids=["t0"])
    assert len(plans) == 5
    assert all(len(p.train_doc_ids) == 80 and len(p.dev_doc_ids) == 20 for p in plans)
    devs = [set(p.dev_doc_ids) for p in plans]
    assert set().union(*devs) == set(docs)
    assert sum(len(d) for d in devs) == 100
    for p in plans:
        assert set(p.train_doc_ids) | set(p.dev_doc_ids) == set(docs)
        assert p.test_doc_ids == ("t0",)
    assert plans == make_random_splits(docs[:70], docs[70:], 5, seed=1, test_ids=["t0"])
    assert plans != make_random_splits(docs[:70], docs[70:], 5, seed=2, test_ids=["t0"])


def test_random_split_sizes_differ_by_at_most_one():
    plans = make_random_splits([f"d{i}" for i in range(23)], [], 5, seed=0)
    sizes = [len(p.dev_doc_ids) for p in plans]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 23


def test_random_splits_errors():
    with pytest.raises(ValueError):
        make_random_splits(["a", "b"], [], 3, seed=0)
    with pytest.raises(ValueError):
        make_random_splits(["a", "b"], [], 1, seed=0)


def test_plan_ids_must_be_disjoint():
    with pytest.raises(ValueError):
        SplitPlan(("a",), ("a",), ())


def test_plan_dict_round_trip():
    plan = make_random_splits(list("abcdef"), [], 3, seed=0)[1]
    assert SplitPlan.from_dict(plan.to_dict()) == plan
    assert plan.name == "random-1of3"


def _sentence_list(plan, corpus):
    return [(d.id, d.text[a:b]) for d in plan.train_documents(corpus) for a, b in d.sentences]


def _all_sentences(corpus, train_ids):
    return [(d.id, d.text[a:b]) for d in corpus.documents if d.id in train_ids for a, b in d.sentences]


def test_low_resource_exact_prefix():
    corpus = generate_corpus(RELATED_SOURCE, 30, 5, seed=0)  # 150 sentences
    plan = standard_plan(ids(corpus)[:25], ids(corpus)[25:28], ids(corpus)[28:])
    full = _all_sentences(corpus, set(plan.train_doc_ids))
    for n in (1, 7, 50, 123):
        sub = low_resource_subset(plan, n, corpus)
        assert _sentence_list(sub, corpus) == full[:n]
        assert sub.dev_doc_ids == plan.dev_doc_ids and sub.test_doc_ids == plan.test_doc_ids
    assert low_resource_subset(plan, 125, corpus) == plan
    assert low_resource_subset(plan, 10_000, corpus) == plan
    with pytest.raises(ValueError):
        low_resource_subset(plan, 0, corpus)


def test_low_resource_budgets_nest_and_compose():
    corpus = generate_corpus(RELATED_SOURCE, 2000, 5, seed=0)  # 10000 sentences
    plan = standard_plan(ids(corpus), [])
    prev = []
    for n in (250, 500, 1000, 2500, 7500):
        cur = _sentence_list(low_resource_subset(plan, n, corpus), corpus)
        assert len(cur) == n
        assert cur[: len(prev)] == prev
        prev = cur
    twice = low_resource_subset(low_resource_subset(plan, 500, corpus), 250, corpus)
    assert _sentence_list(twice, corpus) == _sentence_list(low_resource_subset(plan, 250, corpus), corpus)


def test_partial_document_context_sees_only_kept_sentences(task):
    corpus, vocab, _ = task
    plan = low_resource_subset(standard_plan(ids(corpus), []), 6, corpus)
    docs = plan.train_documents(corpus)
    last = docs[-1]
    assert len(last.sentences) == 2
    full = corpus.by_id()[last.id]
    assert last.text == full.text[: full.sentences[1][1]]
    scheme = TagScheme("BIOSE", corpus.label_set)
    kept = len(segment_document(last, vocab))
    assert kept < len(segment_document(full, vocab))
    for inst in featurize(last, vocab, scheme):
        assert len(inst.ids) <= kept + 2


# ---------------------------------------------------------------- selection


def _rec(score, metric="dev_f1"):
    return RunRecord([1.0], [score], 1, 0, {"mode": "standard"}, metric)


def test_select_median_and_best():
    runs = [_rec(85.1), _rec(87.6), _rec(86.2)]
    assert select_model(runs, "median").dev_f1 == [86.2]
    assert select_model(runs, "best").dev_f1 == [87.6]
    assert select_model([_rec(80), _rec(82), _rec(84), _rec(86)], "median").dev_f1 == [82]
    one = [_rec(70)]
    assert select_model(one, "median") is select_model(one, "best") is one[0]
    with pytest.raises(ValueError):
        select_model([])


def test_select_by_train_loss_without_dev():
    runs = [RunRecord([x], [None], 1, 0, {"mode": "all_data"}, "train_loss") for x in (0.3, 0.1, 0.2)]
    assert select_model(runs, "best").train_loss == [0.1]
    assert select_model(runs, "median").train_loss == [0.2]


def test_run_record_json_round_trip():
    r = RunRecord([0.12345678, 0.1], [0.5, 0.75], 2, 3, {"mode": "standard"}, "dev_f1", "model.ckpt")
    back = RunRecord.from_json(r.to_json())
    assert back.train_loss == [0.123457, 0.1] and back.selected_epoch == 2 and back.checkpoint == "model.ckpt"


# ---------------------------------------------------------------- training


def test_memorizes_ten_sentences(task):
    corpus, vocab, cfg = task
    plan = low_resource_subset(all_data_plan(ids(corpus), []), 10, corpus)
    # batch size 1 so that 20 epochs are 200 updates rather than 20
    rec = train_tagger(cfg, plan, corpus, vocab, Hyperparams(learning_rate=3e-3, batch_size=1, epochs=20, seed=0))
    docs = plan.train_documents(corpus)
    assert sum(len(d.sentences) for d in docs) == 10
    pred = rec.tagger.predict_documents(docs, vocab)
    assert strict_micro_f1(PredictionSet.from_corpus(docs), pred).f1 == 1.0
    assert rec.selection_metric == "train_loss"
    assert rec.train_loss[-1] < rec.train_loss[0]


def test_zero_learning_rate(task):
    corpus, vocab, cfg = task
    plan = standard_plan(ids(corpus)[:8], ids(corpus)[8:])
    rec = train_tagger(cfg, plan, corpus, vocab, Hyperparams(learning_rate=0.0, epochs=3, weight_decay=0.0))
    assert len(set(rec.dev_f1)) == 1
    assert rec.selected_epoch == 1


def test_same_seed_same_checkpoint(task, tmp_path):
    corpus, vocab, cfg = task
    plan = standard_plan(ids(corpus)[:8], ids(corpus)[8:])
    hp = Hyperparams(learning_rate=3e-3, epochs=3, seed=4)
    for name in ("a", "b"):
        train_tagger(cfg, plan, corpus, vocab, hp, checkpoint_path=tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_dev_selection_keeps_best_epoch(task):
    corpus, vocab, cfg = task
    plan = standard_plan(ids(corpus)[:8], ids(corpus)[8:])
    rec = train_tagger(cfg, plan, corpus, vocab, Hyperparams(learning_rate=3e-3, epochs=4, seed=1))
    best = max(rec.dev_f1)
    assert rec.selected_epoch == rec.dev_f1.index(best) + 1
    dev = plan.dev_documents(corpus)
    f1 = strict_micro_f1(PredictionSet.from_corpus(dev), rec.tagger.predict_documents(dev, vocab)).f1
    assert f1 == best


def test_test_leakage_rejected(task):
    corpus, vocab, cfg = task
    plan = SplitPlan(ids(corpus)[:8], ids(corpus)[8:10], ids(corpus)[10:])
    # a corrupted plan whose training ids include a test document
    object.__setattr__(plan, "train_doc_ids", plan.train_doc_ids + (ids(corpus)[11],))
    with pytest.raises(ValueError, match="leak"):
        train_tagger(cfg, plan, corpus, vocab, Hyperparams(epochs=1))


def test_empty_training_set(task):
    corpus, vocab, cfg = task
    with pytest.raises(ValueError):
        train_tagger(cfg, standard_plan([], ids(corpus)), corpus, vocab, Hyperparams(epochs=1))


@pytest.mark.parametrize("ablation", [
    Ablation(scheme="BIO"),
    Ablation(crf=False),
    Ablation(context=False),
    Ablation(unit="word"),
])
def test_ablation_switches_train(task, ablation):
    corpus, vocab, cfg = task
    plan = low_resource_subset(all_data_plan(ids(corpus), []), 10, corpus)
    rec = train_tagger(cfg, plan, corpus, vocab, Hyperparams(learning_rate=1e-2, batch_size=2, epochs=20, seed=0), ablation)
    docs = plan.train_documents(corpus)
    f1 = strict_micro_f1(PredictionSet.from_corpus(docs), rec.tagger.predict_documents(docs, vocab)).f1
    assert f1 == 1.0
    assert rec.tagger.scheme.kind == ablation.scheme


def test_context_switch_changes_window(task):
    corpus, vocab, _ = task
    doc = corpus.documents[0]
    scheme = TagScheme("BIOSE", corpus.label_set)
    with_ctx = featurize(doc, vocab, scheme, Ablation())
    without = featurize(doc, vocab, scheme, Ablation(context=False))
    assert all(len(a.ids) >= len(b.ids) for a, b in zip(with_ctx, without))
    assert any(len(a.ids) > len(b.ids) for a, b in zip(with_ctx, without))
    words = featurize(doc, vocab, scheme, Ablation(unit="word"))
    assert sum(len(i.positions) for i in words) == len(doc.text.split())


def test_tagger_checkpoint_round_trip(task, tmp_path):
    corpus, vocab, cfg = task
    scheme = TagScheme("BIO", corpus.label_set)
    tagger = new_tagger(cfg, scheme, Ablation(scheme="BIO", context=False), seed=3)
    save_checkpoint(tagger, tmp_path / "t.ckpt")
    back = load_checkpoint(tmp_path / "t.ckpt")
    assert back.scheme == scheme and back.ablation == tagger.ablation
    for (n, a), (_, b) in zip(tagger.named_parameters(), back.named_parameters()):
        assert torch.equal(a, b), n
    docs = corpus.documents[:3]
    assert tagger.predict_documents(docs, vocab).documents == back.predict_documents(docs, vocab).documents
