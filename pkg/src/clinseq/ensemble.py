"""Span-level majority voting over the predictions of several models."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .corpus import EntitySpan, PredictionSet


def vote_tally(spans_per_model: Sequence[Sequence[EntitySpan]]) -> Counter:
    tally = Counter()
    for spans in spans_per_model:
        tally.update(set(spans))
    return tally


def _resolve(tally: Counter, threshold: float) -> list[EntitySpan]:
    kept = [s for s, c in tally.items() if c > threshold]
    kept.sort(key=lambda s: (-tally[s], -(s.end - s.start), s.start, s.label))
    chosen: list[EntitySpan] = []
    for span in kept:
        if not any(span.overlaps(c) for c in chosen):
            chosen.append(span)
    return sorted(chosen)


def majority_vote(preds: Sequence[PredictionSet], threshold: float = 0.5, model_id: str = "ensemble") -> PredictionSet:
    """Keep spans predicted by more than ``threshold * m`` models.

    Overlaps among surviving spans are resolved greedily: more votes first, then
    the longer span, the earlier start, the smaller label.
    """
    if not preds:
        raise ValueError("majority_vote needs at least one prediction set")
    docs = set(preds[0].documents)
    for p in preds[1:]:
        if set(p.documents) != docs:
            raise ValueError(f"prediction set {p.model_id!r} covers different documents")
    m = len(preds)
    out = {}
    for doc_id in sorted(docs):
        tally = vote_tally([p.documents[doc_id] for p in preds])
        out[doc_id] = tuple(_resolve(tally, threshold * m))
    return PredictionSet(model_id, out)
