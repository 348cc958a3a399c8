"""Cross-task transfer: weight transplantation and similarity-based source ranking.

Model similarity here is linear centered kernel alignment between the two
models' mean-pooled sentence representations of the same probe sentences.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import Document, TagScheme
from .encoder import load_checkpoint
from .subword import Vocabulary
from .tagger import Ablation, Tagger, featurize

PROBE_LIMIT = 512


class TransferError(ValueError):
    pass


def _as_tagger(model) -> Tagger:
    if isinstance(model, (str, os.PathLike)):
        model = load_checkpoint(model)
    if not isinstance(model, Tagger):
        raise TransferError(f"expected a tagger checkpoint, got {type(model).__name__}")
    return model


def transplant(source, target_scheme: TagScheme, seed: int = 0, ablation: Ablation | None = None,
               vocab_size: int | None = None) -> Tagger:
    """Copy the source encoder; copy the head too when the tag alphabets match,
    otherwise seed a fresh one."""
    source = _as_tagger(source)
    if vocab_size is not None and vocab_size != source.encoder.cfg.vocab_size:
        raise TransferError(
            f"vocabulary mismatch: source has {source.encoder.cfg.vocab_size} tokens, target {vocab_size}"
        )
    ablation = ablation or source.ablation
    if source.scheme == target_scheme:
        tagger = copy.deepcopy(source)
        tagger.ablation = ablation
        return tagger
    return Tagger(copy.deepcopy(source.encoder), target_scheme, ablation, seed)


def sentence_representations(model, probe: Sequence[Document], vocab: Vocabulary,
                             limit: int = PROBE_LIMIT, batch_size: int = 32) -> np.ndarray:
    """[#sentences, d]: mean of final-layer focus representations per probe sentence."""
    tagger = _as_tagger(model)
    if tagger.encoder.cfg.vocab_size != len(vocab):
        raise TransferError(
            f"vocabulary mismatch: model has {tagger.encoder.cfg.vocab_size} tokens, probe vocabulary {len(vocab)}"
        )
    tagger.eval()
    ablation = Ablation(unit="subword", context=tagger.ablation.context, context_size=tagger.ablation.context_size)
    instances = []
    for doc in probe:
        for inst in featurize(doc, vocab, tagger.scheme, ablation, with_gold=False,
                              max_len=tagger.encoder.cfg.max_positions):
            instances.append(inst)
    # long sentences split into several focus chunks are pooled back together
    keys, rows = [], {}
    for inst in instances:
        key = (inst.doc_id, inst.sentence)
        if key not in rows:
            if len(keys) == limit:
                continue
            keys.append(key)
            rows[key] = []
        rows[key].append(inst)
    flat = [inst for key in keys for inst in rows[key]]
    sums = {k: [0.0, 0] for k in keys}
    with torch.no_grad():
        for a in range(0, len(flat), batch_size):
            batch = flat[a : a + batch_size]
            for inst, reps in zip(batch, tagger.represent(batch)):
                acc = sums[(inst.doc_id, inst.sentence)]
                acc[0] = acc[0] + reps.double().numpy().sum(axis=0)
                acc[1] += len(inst.positions)
    return np.stack([sums[k][0] / sums[k][1] for k in keys])


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("representation matrices need the same number of rows")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least 2 probe sentences")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    cross = np.linalg.norm(y.T @ x) ** 2
    norm = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    return float(cross / norm) if norm > 0 else 0.0


def model_similarity(model_a, model_b, probe: Sequence[Document], vocab: Vocabulary) -> float:
    ra = sentence_representations(model_a, probe, vocab)
    rb = sentence_representations(model_b, probe, vocab)
    if ra.shape[0] < 2:
        raise ValueError("model similarity needs at least 2 probe sentences")
    return linear_cka(ra, rb)


@dataclass(frozen=True)
class SourceCandidate:
    task: str
    checkpoint: object  # path or Tagger
    label_set: tuple[str, ...] = ()


def rank_sources(target_probe: Sequence[Document], target_ref_model, candidates: Sequence[SourceCandidate],
                 vocab: Vocabulary) -> list[tuple[str, float]]:
    """Candidates by similarity to the target reference model, descending; ties by name."""
    if not candidates:
        raise ValueError("no transfer candidates")
    ref = sentence_representations(target_ref_model, target_probe, vocab)
    scored = []
    for cand in candidates:
        reps = sentence_representations(cand.checkpoint, target_probe, vocab)
        scored.append((cand.task, linear_cka(ref, reps)))
    return sorted(scored, key=lambda x: (-x[1], x[0]))
