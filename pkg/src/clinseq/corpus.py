"""Documents, annotation spans, tag schemes and the corpus file formats.

Character offsets are always Python ``str`` indices, i.e. Unicode scalar
values, also for standoff ``.ann`` files.
"""

from __future__ import annotations

import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Sequence

logger = logging.getLogger(__name__)

SCHEME_KINDS = ("BIO", "BIOSE")
_PREFIXES = {"BIO": ("B", "I"), "BIOSE": ("B", "I", "E", "S")}


class CorpusFormatError(ValueError):
    """Malformed input file or an annotation that violates the data model."""


class AlignmentError(ValueError):
    """A span cannot be mapped onto the given unit boundaries."""


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int
    label: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span offsets ({self.start}, {self.end})")
        if not self.label or re.search(r"\s", self.label):
            raise ValueError(f"invalid span label {self.label!r}")
        if re.match(r"^[BIESO]-", self.label):
            raise ValueError(f"span label carries a scheme prefix: {self.label!r}")

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start < other.end and other.start < self.end

    def as_tuple(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.label)


def check_non_overlapping(spans: Iterable[EntitySpan], what: str = "spans") -> list[EntitySpan]:
    ordered = sorted(spans)
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise CorpusFormatError(f"overlapping {what}: {a.as_tuple()} and {b.as_tuple()}")
    return ordered


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    sentences: tuple[tuple[int, int], ...]
    spans: tuple[EntitySpan, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(tuple(s) for s in self.sentences))
        prev_end = 0
        for start, end in self.sentences:
            if not prev_end <= start < end <= len(self.text):
                raise CorpusFormatError(
                    f"document {self.id!r}: bad sentence range ({start}, {end})"
                )
            prev_end = end
        spans = check_non_overlapping(self.spans, f"spans in document {self.id!r}")
        for span in spans:
            if self.sentence_of(span) is None:
                raise CorpusFormatError(
                    f"document {self.id!r}: span {span.as_tuple()} is not inside one sentence"
                )
        object.__setattr__(self, "spans", tuple(spans))

    def sentence_of(self, span: EntitySpan) -> int | None:
        for i, (start, end) in enumerate(self.sentences):
            if start <= span.start and span.end <= end:
                return i
        return None

    def sentence_spans(self, index: int) -> list[EntitySpan]:
        start, end = self.sentences[index]
        return [s for s in self.spans if start <= s.start and s.end <= end]

    def with_spans(self, spans: Iterable[EntitySpan]) -> "Document":
        return Document(self.id, self.text, self.sentences, tuple(spans))

    def truncated(self, n_sentences: int) -> "Document":
        """Prefix of the first ``n_sentences`` sentences, text cut after the last one."""
        if n_sentences >= len(self.sentences):
            return self
        sentences = self.sentences[:n_sentences]
        limit = sentences[-1][1]
        return Document(
            self.id, self.text[:limit], sentences, tuple(s for s in self.spans if s.end <= limit)
        )


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...] = ()
    label_set: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "documents", tuple(self.documents))
        ids = [d.id for d in self.documents]
        dupes = [i for i, c in Counter(ids).items() if c > 1]
        if dupes:
            raise CorpusFormatError(f"duplicate document ids: {dupes}")
        labels = sorted({s.label for d in self.documents for s in d.spans})
        object.__setattr__(self, "label_set", tuple(labels))

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}

    def subset(self, ids: Iterable[str]) -> "Corpus":
        wanted = set(ids)
        return Corpus(tuple(d for d in self.documents if d.id in wanted))

    @property
    def n_sentences(self) -> int:
        return sum(len(d.sentences) for d in self.documents)


@dataclass(frozen=True)
class TagScheme:
    kind: str
    label_set: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown tag scheme {self.kind!r}")
        object.__setattr__(self, "label_set", tuple(self.label_set))
        if len(set(self.label_set)) != len(self.label_set):
            raise ValueError("duplicate labels in label_set")

    @property
    def prefixes(self) -> tuple[str, ...]:
        return _PREFIXES[self.kind]

    @cached_property
    def tags(self) -> tuple[str, ...]:
        return ("O",) + tuple(f"{p}-{label}" for label in self.label_set for p in self.prefixes)

    @cached_property
    def tag_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tags)}

    @cached_property
    def _parsed(self) -> dict[str, tuple[str, str | None]]:
        return {t: ("O", None) if t == "O" else (t[0], t[2:]) for t in self.tags}

    def __len__(self):
        return len(self.tags)

    def parse(self, tag: str) -> tuple[str, str | None]:
        """Split a tag string into (prefix, label); raises on anything outside the alphabet."""
        hit = self._parsed.get(tag)
        if hit is not None:
            return hit
        m = re.fullmatch(r"([A-Z])-(\S+)", tag)
        if m is None:
            raise CorpusFormatError(f"malformed tag {tag!r}")
        prefix, label = m.groups()
        if prefix not in self.prefixes:
            raise CorpusFormatError(f"tag {tag!r} uses prefix {prefix!r} unknown to {self.kind}")
        if label not in self.label_set:
            raise CorpusFormatError(f"tag {tag!r} has unknown entity type")
        return prefix, label


# ---------------------------------------------------------------- tag codec


def encode_tags(
    spans: Iterable[EntitySpan], unit_offsets: Sequence[tuple[int, int]], scheme: TagScheme
) -> list[str]:
    """One tag per unit. Span boundaries must coincide with unit boundaries."""
    starts = {s: i for i, (s, _) in enumerate(unit_offsets)}
    ends = {e: i for i, (_, e) in enumerate(unit_offsets)}
    tags = ["O"] * len(unit_offsets)
    for span in check_non_overlapping(spans):
        first, last = starts.get(span.start), ends.get(span.end)
        if first is None or last is None or last < first:
            raise AlignmentError(f"span {span.as_tuple()} does not fall on unit boundaries")
        if scheme.kind == "BIOSE" and first == last:
            tags[first] = f"S-{span.label}"
            continue
        tags[first] = f"B-{span.label}"
        for i in range(first + 1, last + 1):
            tags[i] = f"I-{span.label}"
        if scheme.kind == "BIOSE":
            tags[last] = f"E-{span.label}"
    return tags


def _chunks(tags: Sequence[str | int], scheme: TagScheme) -> tuple[list[tuple[int, int, str]], int]:
    """Chunk a tag sequence as (first_unit, last_unit, label), counting repaired positions."""
    names = scheme.tags
    chunks: list[tuple[int, int, str]] = []
    repairs = 0
    open_chunk: list | None = None  # [first, last, label, last_prefix]

    def close():
        nonlocal open_chunk, repairs
        if open_chunk is not None:
            if scheme.kind == "BIOSE" and open_chunk[3] != "E":
                repairs += 1
            chunks.append((open_chunk[0], open_chunk[1], open_chunk[2]))
            open_chunk = None

    for i, tag in enumerate(tags):
        if not isinstance(tag, str):
            if not 0 <= tag < len(names):
                raise CorpusFormatError(f"tag id {tag} outside the alphabet")
            tag = names[tag]
        prefix, label = scheme.parse(tag)
        if prefix == "O":
            close()
        elif prefix == "S":
            close()
            chunks.append((i, i, label))
        elif prefix == "B":
            close()
            open_chunk = [i, i, label, "B"]
        else:  # I or E
            if open_chunk is None or open_chunk[2] != label:
                close()
                repairs += 1
                open_chunk = [i, i, label, prefix]
            else:
                open_chunk[1], open_chunk[3] = i, prefix
            if prefix == "E":
                close()
    close()
    return chunks, repairs


def decode_tags(
    tags: Sequence[str | int], unit_offsets: Sequence[tuple[int, int]], scheme: TagScheme
) -> list[EntitySpan]:
    """Spans from a tag sequence. Total: invalid sequences are repaired, never rejected.

    ``I-x``/``E-x`` that do not continue an open ``x`` chunk open a new one; a chunk
    closes at ``O``, ``B-``, ``S-``, a type change, ``E-`` or the end of the sequence.
    """
    if len(tags) != len(unit_offsets):
        raise ValueError("tags and unit_offsets differ in length")
    chunks, _ = _chunks(tags, scheme)
    return [EntitySpan(unit_offsets[a][0], unit_offsets[b][1], label) for a, b, label in chunks]


def count_repairs(tags: Sequence[str | int], scheme: TagScheme) -> int:
    """Number of repair decisions :func:`decode_tags` needs for this sequence (0 = well formed)."""
    return _chunks(tags, scheme)[1]


# ---------------------------------------------------------------- CoNLL


@dataclass(frozen=True)
class ConllConfig:
    scheme: str = "BIOSE"
    token_column: int = 0
    label_set: tuple[str, ...] | None = None  # inferred from the file when None


_DOC_HEADER = re.compile(r"#\s*doc_id\s*=\s*(.+?)\s*$")


def read_conll(stream: IO[bytes] | bytes, cfg: ConllConfig = ConllConfig()) -> Corpus:
    data = stream if isinstance(stream, bytes) else stream.read()
    lines = data.decode("utf-8").splitlines()

    raw_docs: list[tuple[str, list[list[tuple[str, str]]]]] = []
    sentence: list[tuple[str, str]] = []

    def flush():
        nonlocal sentence
        if sentence:
            if not raw_docs:
                raw_docs.append(("doc0", []))
            raw_docs[-1][1].append(sentence)
            sentence = []

    for lineno, line in enumerate(lines, 1):
        m = _DOC_HEADER.match(line)
        if m:
            flush()
            raw_docs.append((m.group(1), []))
            continue
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise CorpusFormatError(f"line {lineno}: expected tab-separated token and tag")
        token, tag = cols[cfg.token_column], cols[-1]
        if not token or re.search(r"\s", token):
            raise CorpusFormatError(f"line {lineno}: empty token or token with whitespace")
        sentence.append((token, tag))
    flush()

    labels = cfg.label_set
    if labels is None:
        found = set()
        for _, sents in raw_docs:
            for sent in sents:
                for lineno_tag in sent:
                    tag = lineno_tag[1]
                    if tag != "O":
                        m = re.fullmatch(r"[A-Z]-(\S+)", tag)
                        if m is None:
                            raise CorpusFormatError(f"malformed tag {tag!r}")
                        found.add(m.group(1))
        labels = tuple(sorted(found))
    scheme = TagScheme(cfg.scheme, labels)

    documents = []
    for doc_id, sents in raw_docs:
        if not sents:
            raise CorpusFormatError(f"document {doc_id!r} is empty")
        text_parts: list[str] = []
        offset = 0
        sentences, spans = [], []
        for sent in sents:
            units = []
            for j, (token, _) in enumerate(sent):
                if j:
                    offset += 1
                units.append((offset, offset + len(token)))
                offset += len(token)
            sentences.append((units[0][0], units[-1][1]))
            spans.extend(decode_tags([t for _, t in sent], units, scheme))
            text_parts.append(" ".join(tok for tok, _ in sent))
            offset += 1  # sentence separator
        documents.append(Document(doc_id, "\n".join(text_parts), tuple(sentences), tuple(spans)))
    return Corpus(tuple(documents))


def whitespace_units(text: str, start: int = 0, end: int | None = None) -> list[tuple[int, int]]:
    end = len(text) if end is None else end
    return [(m.start() + start, m.end() + start) for m in re.finditer(r"\S+", text[start:end])]


def write_conll(corpus: Corpus, scheme: TagScheme) -> bytes:
    out = io.StringIO()
    for doc in corpus.documents:
        out.write(f"# doc_id = {doc.id}\n")
        for i, (start, end) in enumerate(doc.sentences):
            units = whitespace_units(doc.text, start, end)
            try:
                tags = encode_tags(doc.sentence_spans(i), units, scheme)
            except AlignmentError as exc:
                raise AlignmentError(f"document {doc.id!r}: {exc}") from None
            for (a, b), tag in zip(units, tags):
                out.write(f"{doc.text[a:b]}\t{tag}\n")
            out.write("\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------- standoff

_SENT_END = re.compile(r"[.!?](?=\s)|\n")


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Rule-based splitter: a sentence ends after ``.``, ``!`` or ``?`` followed by
    whitespace, or at a newline. Ranges are trimmed; empty ones dropped."""
    ranges, start = [], 0
    for m in _SENT_END.finditer(text):
        ranges.append((start, m.end()))
        start = m.end()
    ranges.append((start, len(text)))
    out = []
    for a, b in ranges:
        seg = text[a:b]
        stripped = seg.strip()
        if stripped:
            a2 = a + (len(seg) - len(seg.lstrip()))
            out.append((a2, a2 + len(stripped)))
    return out


def _merge_sentences(sentences: list[tuple[int, int]], spans: list[EntitySpan]):
    merged = list(sentences)
    for span in spans:
        hit = [i for i, (a, b) in enumerate(merged) if a < span.end and span.start < b]
        if not hit:
            raise CorpusFormatError(f"span {span.as_tuple()} lies outside every sentence")
        first, last = hit[0], hit[-1]
        if first != last or not (merged[first][0] <= span.start and span.end <= merged[first][1]):
            lo = min(merged[first][0], span.start)
            hi = max(merged[last][1], span.end)
            merged[first : last + 1] = [(lo, hi)]
    return merged


def read_standoff(
    text: IO[bytes] | bytes,
    ann: IO[bytes] | bytes,
    doc_id: str = "doc",
    stats: Counter | None = None,
) -> Document:
    """Read a ``.txt``/``.ann`` pair. Discontinuous annotations are skipped and counted
    under ``stats["discontinuous"]``. Gold spans crossing a sentence boundary merge
    the sentences they touch."""
    raw_text = text if isinstance(text, bytes) else text.read()
    raw_ann = ann if isinstance(ann, bytes) else ann.read()
    content = raw_text.decode("utf-8")
    stats = Counter() if stats is None else stats
    spans = []
    for lineno, line in enumerate(raw_ann.decode("utf-8").splitlines(), 1):
        if not line.startswith("T"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise CorpusFormatError(f"ann line {lineno}: expected 3 tab-separated fields")
        ann_id, middle, surface = parts[0], parts[1], parts[2]
        fields = middle.split(" ", 1)
        if len(fields) != 2:
            raise CorpusFormatError(f"annotation {ann_id}: missing offsets")
        label, offsets = fields
        if ";" in offsets:
            stats["discontinuous"] += 1
            logger.warning("skipping discontinuous annotation %s in %s", ann_id, doc_id)
            continue
        try:
            start, end = (int(x) for x in offsets.split())
        except ValueError:
            raise CorpusFormatError(f"annotation {ann_id}: bad offsets {offsets!r}") from None
        if not 0 <= start < end <= len(content):
            raise CorpusFormatError(f"annotation {ann_id}: offsets ({start}, {end}) out of range")
        if content[start:end] != surface:
            raise CorpusFormatError(
                f"annotation {ann_id}: surface {surface!r} does not match text {content[start:end]!r}"
            )
        spans.append(EntitySpan(start, end, label))
    spans = check_non_overlapping(spans, f"gold spans in {doc_id!r}")
    sentences = _merge_sentences(split_sentences(content), spans)
    return Document(doc_id, content, tuple(sentences), tuple(spans))


def write_standoff(doc: Document) -> tuple[bytes, bytes]:
    lines = [
        f"T{i}\t{s.label} {s.start} {s.end}\t{doc.text[s.start:s.end]}"
        for i, s in enumerate(doc.spans, 1)
    ]
    ann = "".join(line + "\n" for line in lines)
    return doc.text.encode("utf-8"), ann.encode("utf-8")


# ---------------------------------------------------------------- JSON lines


@dataclass(frozen=True)
class PredictionSet:
    """Spans per document id, as produced by one model (or the gold layer)."""

    model_id: str
    documents: dict[str, tuple[EntitySpan, ...]]

    def __post_init__(self):
        docs = {}
        for doc_id, spans in self.documents.items():
            docs[doc_id] = tuple(check_non_overlapping(spans, f"spans of {doc_id!r}"))
        object.__setattr__(self, "documents", docs)

    @classmethod
    def from_corpus(cls, corpus: Corpus | Iterable[Document], model_id: str = "gold"):
        return cls(model_id, {d.id: d.spans for d in corpus})


def dump_documents_jsonl(docs: Iterable[Document]) -> bytes:
    lines = []
    for d in docs:
        rec = {
            "id": d.id,
            "text": d.text,
            "sentences": [list(s) for s in d.sentences],
            "spans": [list(s.as_tuple()) for s in d.spans],
        }
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "".join(line + "\n" for line in lines).encode("utf-8")


def load_documents_jsonl(data: bytes) -> Corpus:
    docs = []
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            text = rec["text"]
            sentences = rec.get("sentences") or split_sentences(text)
            spans = tuple(EntitySpan(int(a), int(b), str(c)) for a, b, c in rec.get("spans", ()))
            docs.append(Document(str(rec["id"]), text, tuple(map(tuple, sentences)), spans))
        except KeyError as exc:
            raise CorpusFormatError(f"jsonl line {lineno}: missing field {exc}") from None
    return Corpus(tuple(docs))


def dump_predictions_jsonl(preds: PredictionSet) -> bytes:
    lines = [
        json.dumps({"id": doc_id, "spans": [list(s.as_tuple()) for s in spans]}, ensure_ascii=False)
        for doc_id, spans in preds.documents.items()
    ]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def load_predictions_jsonl(data: bytes, model_id: str = "pred") -> PredictionSet:
    docs = {}
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        docs[str(rec["id"])] = tuple(EntitySpan(int(a), int(b), str(c)) for a, b, c in rec["spans"])
    return PredictionSet(model_id, docs)
