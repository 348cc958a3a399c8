"""BPE vocabulary, offset-tracked segmentation and cross-sentence context windows."""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .corpus import AlignmentError, Document, EntitySpan, TagScheme, encode_tags

PAD, UNK, MASK, BOS, EOS = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]")
VOCAB_HEADER = "clinseq-bpe v1"
DEFAULT_CONTEXT = 100
MAX_WINDOW = 512


class VocabularyError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[list[int], list[tuple[int, int]]]] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise VocabularyError("special tokens must occupy ids 0..4")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        for left, right in self.merges:
            if left + right not in self._index:
                raise VocabularyError(f"merge output {left + right!r} missing from tokens")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def segment_word(self, word: str) -> tuple[list[int], list[tuple[int, int]]]:
        """Ids and word-relative character spans for one whitespace-free word."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        pieces = [(c, i, i + 1) for i, c in enumerate(word)]
        while len(pieces) > 1:
            best = None
            for j in range(len(pieces) - 1):
                a, b = pieces[j][0], pieces[j + 1][0]
                if a not in self._index or b not in self._index:
                    continue
                rank = self._ranks.get((a, b))
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, a, b)
            if best is None:
                break
            _, a, b = best
            merged, j = [], 0
            while j < len(pieces):
                if j + 1 < len(pieces) and pieces[j][0] == a and pieces[j + 1][0] == b:
                    merged.append((a + b, pieces[j][1], pieces[j + 1][2]))
                    j += 2
                else:
                    merged.append(pieces[j])
                    j += 1
            pieces = merged
        result = ([self.id_of(p[0]) for p in pieces], [(p[1], p[2]) for p in pieces])
        self._cache[word] = result
        return result

    def save(self, path: str | os.PathLike) -> None:
        lines = [VOCAB_HEADER, *self.tokens, "#merges", *(f"{a}\t{b}" for a, b in self.merges)]
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0] != VOCAB_HEADER:
            raise VocabularyError(f"{path}: not a {VOCAB_HEADER!r} file")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            split = lines.index("#merges")
        except ValueError:
            raise VocabularyError(f"{path}: missing #merges section") from None
        merges = []
        for line in lines[split + 1 :]:
            left, right = line.split("\t")
            merges.append((left, right))
        return cls(lines[1:split], merges)


def train_bpe(corpus: Iterable[str], vocab_size: int, seed: int = 0) -> Vocabulary:
    """Greedy BPE over whitespace-pretokenized words.

    Merges the most frequent adjacent pair until ``vocab_size`` tokens exist or no
    pair occurs at least twice. Ties go to the lexicographically smallest pair, so
    ``seed`` has no influence on the result; it is accepted for interface symmetry.
    """
    words = Counter()
    for text in corpus:
        words.update(text.split())
    if not words:
        raise VocabularyError("cannot train a vocabulary on an empty corpus")
    alphabet = sorted({c for w in words for c in w})
    base = len(SPECIAL_TOKENS) + len(alphabet)
    if vocab_size < base:
        raise VocabularyError(f"vocab_size {vocab_size} below alphabet + specials ({base})")
    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    state = {w: list(w) for w in words}
    while len(tokens) < vocab_size:
        pairs = Counter()
        for w, freq in words.items():
            syms = state[w]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += freq
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        a, b = min(p for p, c in pairs.items() if c == best_count)
        merges.append((a, b))
        if a + b not in known:
            tokens.append(a + b)
            known.add(a + b)
        for w, syms in state.items():
            if len(syms) < 2:
                continue
            out, j = [], 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == a and syms[j + 1] == b:
                    out.append(a + b)
                    j += 2
                else:
                    out.append(syms[j])
                    j += 1
            state[w] = out
    return Vocabulary(tokens, merges)


@dataclass(frozen=True)
class SubwordSequence:
    ids: tuple[int, ...]
    char_spans: tuple[tuple[int, int], ...]
    sentence_index: tuple[int, ...]

    def __len__(self):
        return len(self.ids)

    def sentence_bounds(self, index: int) -> tuple[int, int]:
        """Half-open subword range of one sentence (empty if it has no subwords)."""
        lo = next((i for i, s in enumerate(self.sentence_index) if s == index), None)
        if lo is None:
            return (0, 0)
        hi = lo
        while hi < len(self.ids) and self.sentence_index[hi] == index:
            hi += 1
        return (lo, hi)

    def word_starts(self) -> list[bool]:
        """True where a subword starts a new whitespace-delimited word."""
        return [i == 0 or self.char_spans[i - 1][1] != s for i, (s, _) in enumerate(self.char_spans)]


def segment(text: str, vocab: Vocabulary, offset: int = 0, sentence: int = 0) -> SubwordSequence:
    ids, spans = [], []
    for m in re.finditer(r"\S+", text):
        w_ids, w_spans = vocab.segment_word(m.group())
        base = m.start() + offset
        ids.extend(w_ids)
        spans.extend((base + a, base + b) for a, b in w_spans)
    return SubwordSequence(tuple(ids), tuple(spans), (sentence,) * len(ids))


def segment_document(doc: Document, vocab: Vocabulary) -> SubwordSequence:
    ids, spans, sent = [], [], []
    for i, (start, end) in enumerate(doc.sentences):
        sw = segment(doc.text[start:end], vocab, offset=start, sentence=i)
        ids.extend(sw.ids)
        spans.extend(sw.char_spans)
        sent.extend(sw.sentence_index)
    return SubwordSequence(tuple(ids), tuple(spans), tuple(sent))


def expand_to_units(
    spans: Iterable[EntitySpan], unit_offsets: Sequence[tuple[int, int]]
) -> tuple[list[EntitySpan], int]:
    """Grow each span to the covering run of units; returns (spans, #misaligned)."""
    out, misaligned = [], 0
    for span in spans:
        covered = [i for i, (a, b) in enumerate(unit_offsets) if a < span.end and span.start < b]
        if not covered:
            raise AlignmentError(f"span {span.as_tuple()} covers no unit")
        start, end = unit_offsets[covered[0]][0], unit_offsets[covered[-1]][1]
        if (start, end) != (span.start, span.end):
            misaligned += 1
        out.append(EntitySpan(start, end, span.label))
    return out, misaligned


def align_spans(
    spans: Iterable[EntitySpan], sw: SubwordSequence, scheme: TagScheme
) -> tuple[list[str], int]:
    """Subword tags for ``spans`` plus the number of spans whose boundary fell inside a subword."""
    expanded, misaligned = expand_to_units(spans, sw.char_spans)
    ordered = sorted(expanded)
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise AlignmentError(f"spans overlap after expansion: {a.as_tuple()}, {b.as_tuple()}")
    return encode_tags(ordered, sw.char_spans, scheme), misaligned


@dataclass(frozen=True)
class ContextWindow:
    ids: tuple[int, ...]
    focus_range: tuple[int, int]
    k: int
    doc_offset: int = 0  # document subword index of window position 0

    def __len__(self):
        return len(self.ids)

    @property
    def focus_doc_range(self) -> tuple[int, int]:
        return (self.doc_offset + self.focus_range[0], self.doc_offset + self.focus_range[1])


def window_for_range(doc_sw: SubwordSequence, lo: int, hi: int, k: int) -> ContextWindow:
    if hi <= lo:
        raise ValueError("empty focus range")
    left = max(0, lo - k)
    right = min(len(doc_sw), hi + k)
    return ContextWindow(doc_sw.ids[left:right], (lo - left, hi - left), k, left)


def build_context(doc_sw: SubwordSequence, sentence_index: int, k: int = DEFAULT_CONTEXT) -> ContextWindow:
    """Focus sentence plus up to ``k`` subwords of same-document context per side."""
    lo, hi = doc_sw.sentence_bounds(sentence_index)
    if hi <= lo:
        raise ValueError(f"sentence {sentence_index} has no subwords")
    return window_for_range(doc_sw, lo, hi, k)


def document_windows(
    doc_sw: SubwordSequence, k: int = DEFAULT_CONTEXT, max_len: int = MAX_WINDOW
) -> list[tuple[int, ContextWindow]]:
    """(sentence_index, window) for every nonempty sentence. Sentences longer than
    ``max_len - 2k`` subwords are cut into consecutive focus chunks of that size."""
    chunk = max_len - 2 * k
    if chunk < 1:
        raise ValueError(f"context {k} leaves no room for a focus within {max_len} positions")
    out = []
    n_sent = (max(doc_sw.sentence_index) + 1) if doc_sw.sentence_index else 0
    for s in range(n_sent):
        lo, hi = doc_sw.sentence_bounds(s)
        for a in range(lo, hi, chunk):
            out.append((s, window_for_range(doc_sw, a, min(hi, a + chunk), k)))
    return out
