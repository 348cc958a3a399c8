"""Generated sublanguages and tagging tasks for experiments and tests.

A *family* is a lexicon of invented words, built from a family-specific syllable
inventory, with word classes (drug-like, finding-like, modifier, neutral) and a
set of sentence templates. Some templates reveal a word's class through its
context; others place any class in the same slot, so labeling them needs lexical
knowledge: from labeled examples, from masked-LM pretraining on unlabeled text
of the family, or from a related task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Document, EntitySpan

_SYLLABLES = {
    0: ("b", "d", "g", "k", "l", "m", "n", "p", "r", "t"),
    1: ("c", "f", "h", "j", "q", "s", "v", "w", "x", "z"),
}
_VOWELS = ("a", "e", "i", "o", "u")


@dataclass(frozen=True)
class Lexicon:
    family: int
    heads: tuple[str, ...]  # entity class 1 (drug-like)
    findings: tuple[str, ...]  # entity class 2 (finding-like)
    modifiers: tuple[str, ...]  # may precede a finding inside the same entity
    neutral: tuple[str, ...]
    function: tuple[str, ...]


def make_lexicon(family: int = 0, n_class: int = 60, seed: int = 1234) -> Lexicon:
    rng = np.random.default_rng([family, seed])
    cons = _SYLLABLES[family]
    seen: set[str] = set()

    def word(n_syl):
        while True:
            w = "".join(cons[rng.integers(len(cons))] + _VOWELS[rng.integers(5)] for _ in range(n_syl))
            if w not in seen:
                seen.add(w)
                return w

    function = tuple(word(1) for _ in range(12))
    modifiers = tuple(word(2) for _ in range(6))
    heads = tuple(word(3) for _ in range(n_class))
    findings = tuple(word(3) for _ in range(n_class))
    neutral = tuple(word(3) for _ in range(n_class))
    return Lexicon(family, heads, findings, modifiers, neutral, function)


@dataclass(frozen=True)
class TaskSpec:
    """Which lexicon classes are entities, under which labels, and how often the
    class-revealing templates are used (``cue_rate``)."""

    family: int = 0
    head_label: str = "DRUG"
    finding_label: str = "DISO"
    cue_rate: float = 0.5
    variant: int = 0  # selects a different set of function words for the templates


RELATED_SOURCE = TaskSpec(0, "DRUG", "DISO", 0.5, 0)
RELATED_TARGET = TaskSpec(0, "MED", "PROBLEM", 0.3, 1)
UNRELATED_SOURCE = TaskSpec(1, "TIME", "PLACE", 0.5, 0)


def _sentence(lex: Lexicon, spec: TaskSpec, rng: np.random.Generator):
    """One sentence as a list of (word, label-or-None, entity-id) triples."""
    f = lex.function
    v = spec.variant * 4
    kind = rng.integers(3)
    if rng.random() < spec.cue_rate:
        # class-revealing templates
        if kind == 0:
            words = [(f[v], None), (f[v + 1], None), ("H", None), (f[v + 2], None)]
        elif kind == 1:
            words = [(f[v + 3], None), ("F", None), (f[(v + 5) % 12], None)]
        else:
            words = [(f[(v + 6) % 12], None), ("N", None), (f[(v + 7) % 12], None)]
    else:
        words = [(f[(v + 8) % 12], None), ("X", None), (f[(v + 9) % 12], None), ("X", None)]
    out = []
    ent = 0
    for w, _ in words:
        slot = w
        if w == "X":
            slot = "HFN"[rng.integers(3)]
        if slot == "H":
            ent += 1
            out.append((lex.heads[rng.integers(len(lex.heads))], spec.head_label, ent))
        elif slot == "F":
            ent += 1
            if rng.random() < 0.5:
                out.append((lex.modifiers[rng.integers(len(lex.modifiers))], spec.finding_label, ent))
            out.append((lex.findings[rng.integers(len(lex.findings))], spec.finding_label, ent))
        elif slot == "N":
            out.append((lex.neutral[rng.integers(len(lex.neutral))], None, 0))
        else:
            out.append((w, None, 0))
    return out


def generate_corpus(spec: TaskSpec, n_docs: int, sentences_per_doc: int = 4, seed: int = 0,
                    id_prefix: str = "d", lexicon: Lexicon | None = None) -> Corpus:
    lex = lexicon or make_lexicon(spec.family)
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        text, sentences, spans = "", [], []
        for _ in range(sentences_per_doc):
            if text:
                text += " "
            start = len(text)
            cur = None  # [start, end, label, ent]
            for j, (w, label, ent) in enumerate(_sentence(lex, spec, rng)):
                if j:
                    text += " "
                a = len(text)
                text += w
                if label is not None and cur is not None and cur[3] == ent:
                    cur[1] = len(text)
                else:
                    if cur is not None:
                        spans.append(EntitySpan(cur[0], cur[1], cur[2]))
                    cur = [a, len(text), label, ent] if label is not None else None
            if cur is not None:
                spans.append(EntitySpan(cur[0], cur[1], cur[2]))
            text += " ."
            sentences.append((start, len(text)))
        docs.append(Document(f"{id_prefix}{i:04d}", text, tuple(sentences), tuple(spans)))
    return Corpus(tuple(docs))


def unlabeled_texts(spec: TaskSpec, n_docs: int, sentences_per_doc: int = 4, seed: int = 0) -> list[Document]:
    """Documents of the family's sublanguage with annotations stripped."""
    corpus = generate_corpus(spec, n_docs, sentences_per_doc, seed, id_prefix="u")
    return [d.with_spans(()) for d in corpus.documents]
