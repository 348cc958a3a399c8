"""Strict span-level micro F1 and paired approximate-randomization testing."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import PredictionSet

logger = logging.getLogger(__name__)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    # equals 2PR/(P+R), without the intermediate rounding
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return p, r, f


@dataclass(frozen=True)
class TypeScores:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return prf(self.tp, self.fp, self.fn)[2]


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    per_type: dict[str, TypeScores] = field(default_factory=dict)
    n_documents: int = 0

    @property
    def precision(self) -> float:
        return prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return prf(self.tp, self.fp, self.fn)[2]

    def to_dict(self, per_type: bool = True) -> dict:
        out = {
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "f1": round(self.f1, 6),
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "documents": self.n_documents,
        }
        if per_type:
            out["per_type"] = {
                label: {
                    "tp": s.tp, "fp": s.fp, "fn": s.fn,
                    "precision": round(s.precision, 6), "recall": round(s.recall, 6), "f1": round(s.f1, 6),
                }
                for label, s in sorted(self.per_type.items())
            }
        return out

    def table(self, per_type: bool = False) -> str:
        rows = [("type", "tp", "fp", "fn", "precision", "recall", "f1")]
        if per_type:
            for label, s in sorted(self.per_type.items()):
                rows.append((label, s.tp, s.fp, s.fn, f"{s.precision:.4f}", f"{s.recall:.4f}", f"{s.f1:.4f}"))
        rows.append(("micro", self.tp, self.fp, self.fn,
                     f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}"))
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
            for r in rows
        )


def _check_docs(gold: PredictionSet, pred: PredictionSet):
    if set(gold.documents) != set(pred.documents):
        missing = sorted(set(gold.documents) ^ set(pred.documents))
        raise ValueError(f"document sets differ, e.g. {missing[:3]}")


def _doc_counts(gold_spans, pred_spans) -> dict[str, list[int]]:
    g = {s.as_tuple() for s in gold_spans}
    p = {s.as_tuple() for s in pred_spans}
    counts: dict[str, list[int]] = {}
    for t in g | p:
        c = counts.setdefault(t[2], [0, 0, 0])
        if t in g and t in p:
            c[0] += 1
        elif t in p:
            c[1] += 1
        else:
            c[2] += 1
    return counts


def strict_micro_f1(gold: PredictionSet, pred: PredictionSet) -> EvalReport:
    """Exact (start, end, label) matching pooled over documents and types."""
    _check_docs(gold, pred)
    totals: dict[str, list[int]] = {}
    for doc_id, gspans in gold.documents.items():
        for label, c in _doc_counts(gspans, pred.documents[doc_id]).items():
            t = totals.setdefault(label, [0, 0, 0])
            for i in range(3):
                t[i] += c[i]
    per_type = {label: TypeScores(*c) for label, c in totals.items()}
    tp = sum(c.tp for c in per_type.values())
    fp = sum(c.fp for c in per_type.values())
    fn = sum(c.fn for c in per_type.values())
    return EvalReport(tp, fp, fn, per_type, len(gold.documents))


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    iterations: int
    seed: int | None
    observed_delta: float

    @property
    def code(self) -> str:
        return significance_code(self.p_value)


def significance_code(p: float) -> str:
    if p <= 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "n.s."


def _count_matrix(gold: PredictionSet, pred: PredictionSet, doc_ids) -> np.ndarray:
    rows = []
    for d in doc_ids:
        c = _doc_counts(gold.documents[d], pred.documents[d]).values()
        rows.append([sum(x[i] for x in c) for i in range(3)])
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def _f1_rows(counts: np.ndarray) -> np.ndarray:
    """F1 per row of summed [tp, fp, fn] counts, zero where undefined."""
    tp, fp, fn = counts[..., 0].astype(float), counts[..., 1].astype(float), counts[..., 2].astype(float)
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


_TOL = 1e-12


def significance_test(
    gold: PredictionSet,
    pred_a: PredictionSet,
    pred_b: PredictionSet,
    iterations: int = 10000,
    seed: int = 0,
    exact: bool = False,
) -> SignificanceResult:
    """Paired approximate randomization at document granularity.

    Each iteration swaps every document's A/B outputs with probability 1/2 and
    recomputes |F1(A') - F1(B')|; p = (hits + 1) / (iterations + 1). With
    ``exact=True`` all 2^D swap patterns are enumerated and p = hits / 2^D.
    """
    _check_docs(gold, pred_a)
    _check_docs(gold, pred_b)
    doc_ids = sorted(gold.documents)
    if len(doc_ids) < 2:
        logger.warning("significance test over a single document is degenerate")
    ca = _count_matrix(gold, pred_a, doc_ids)
    cb = _count_matrix(gold, pred_b, doc_ids)
    observed = abs(_f1_rows(ca.sum(0)) - _f1_rows(cb.sum(0)))
    diff = cb - ca
    base = ca.sum(0)

    def deltas(swaps: np.ndarray) -> np.ndarray:
        a = base + swaps @ diff
        b = base + diff.sum(0) - swaps @ diff
        return np.abs(_f1_rows(a) - _f1_rows(b))

    if exact:
        D = len(doc_ids)
        if D > 20:
            raise ValueError("exact enumeration limited to 20 documents")
        swaps = np.array(list(itertools.product((0, 1), repeat=D)), dtype=np.int64).reshape(-1, D)
        hits = int((deltas(swaps) >= observed - _TOL).sum())
        return SignificanceResult(hits / len(swaps), len(swaps), None, float(observed))

    hits = 0
    chunk = 4096
    seeds = np.random.SeedSequence(seed).spawn(-(-iterations // chunk))
    for i, ss in enumerate(seeds):
        n = min(chunk, iterations - i * chunk)
        swaps = np.random.default_rng(ss).integers(0, 2, size=(n, len(doc_ids)), dtype=np.int64)
        hits += int((deltas(swaps) >= observed - _TOL).sum())
    return SignificanceResult((hits + 1) / (iterations + 1), iterations, seed, float(observed))
