"""Encoder + emission/CRF head, document featurization and prediction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .corpus import Document, EntitySpan, PredictionSet, TagScheme, decode_tags, encode_tags
from .crf import CrfParams, argmax_decode, build_transition_mask, emissions, viterbi
from .encoder import EncoderConfig, EncoderModel, init_encoder, pad_batch
from .subword import (
    DEFAULT_CONTEXT, MAX_WINDOW, Vocabulary, document_windows, expand_to_units, segment_document,
)


@dataclass(frozen=True)
class Ablation:
    """Model component switches: tag scheme, CRF layer, cross-sentence context,
    subword- vs word-level labeling units."""

    scheme: str = "BIOSE"
    crf: bool = True
    context: bool = True
    unit: str = "subword"
    context_size: int = DEFAULT_CONTEXT
    constrained_decode: bool = True
    constrained_training: bool = False

    def __post_init__(self):
        if self.unit not in ("subword", "word"):
            raise ValueError(f"unit must be 'subword' or 'word', not {self.unit!r}")
        if self.scheme not in ("BIO", "BIOSE"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def k(self) -> int:
        return self.context_size if self.context else 0


@dataclass(frozen=True)
class Instance:
    """One focus chunk: encoder window, positions that carry labels, their char offsets."""

    doc_id: str
    sentence: int
    ids: tuple[int, ...]
    positions: tuple[int, ...]
    unit_offsets: tuple[tuple[int, int], ...]
    gold: tuple[int, ...] | None
    misaligned: int = 0


def featurize(
    doc: Document,
    vocab: Vocabulary,
    scheme: TagScheme,
    ablation: Ablation = Ablation(),
    with_gold: bool = True,
    max_len: int = MAX_WINDOW,
) -> list[Instance]:
    sw = segment_document(doc, vocab)
    starts = sw.word_starts()
    index = scheme.tag_index
    out = []
    for sent, window in document_windows(sw, ablation.k, max_len):
        lo, hi = window.focus_doc_range
        if ablation.unit == "subword":
            doc_pos = list(range(lo, hi))
            offsets = [sw.char_spans[i] for i in doc_pos]
        else:
            doc_pos = [i for i in range(lo, hi) if starts[i]]
            offsets = []
            for i in doc_pos:
                j = i + 1
                while j < len(sw) and not starts[j]:
                    j += 1
                offsets.append((sw.char_spans[i][0], sw.char_spans[j - 1][1]))
        gold, misaligned = None, 0
        if with_gold:
            c_lo, c_hi = offsets[0][0], offsets[-1][1]
            spans = [s for s in doc.sentence_spans(sent) if s.start < c_hi and c_lo < s.end]
            expanded, misaligned = expand_to_units(spans, offsets)
            gold = tuple(index[t] for t in encode_tags(expanded, offsets, scheme))
        out.append(
            Instance(
                doc.id, sent, window.ids,
                tuple(i - window.doc_offset for i in doc_pos), tuple(offsets), gold, misaligned,
            )
        )
    return out


class Tagger(nn.Module):
    def __init__(self, encoder: EncoderModel, scheme: TagScheme, ablation: Ablation = Ablation(), seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.scheme = scheme
        self.ablation = ablation
        d, Y = encoder.cfg.model_dim, len(scheme)
        self.W = nn.Parameter(torch.empty(d, Y))
        self.b = nn.Parameter(torch.zeros(Y))
        self.T = nn.Parameter(torch.zeros(Y, Y))
        self.start = nn.Parameter(torch.zeros(Y))
        self.end = nn.Parameter(torch.zeros(Y))
        self.reset_head(seed)
        self._mask = build_transition_mask(scheme)

    def reset_head(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(self.W.shape[0])
        with torch.no_grad():
            self.W.uniform_(-bound, bound, generator=gen)
            for p in (self.b, self.T, self.start, self.end):
                p.zero_()

    @property
    def mask(self):
        return self._mask

    def head_params(self) -> CrfParams:
        return CrfParams(*(p.detach().double().numpy().copy() for p in (self.W, self.b, self.T, self.start, self.end)))

    def head_tensors(self) -> list[nn.Parameter]:
        return [self.W, self.b, self.T, self.start, self.end]

    def represent(self, instances: list[Instance], gen: torch.Generator | None = None) -> list[torch.Tensor]:
        """Encoder outputs at each instance's labeled positions."""
        ids, key_mask = pad_batch([inst.ids for inst in instances])
        reps = self.encoder(ids, key_mask, gen)
        return [reps[i, list(inst.positions)] for i, inst in enumerate(instances)]

    # -- prediction

    def decode_instance(self, reps: np.ndarray, inst: Instance) -> list[EntitySpan]:
        params = self.head_params()
        em = emissions(params.W, params.b, reps)
        if self.ablation.crf:
            tags = viterbi(params, em, self._mask if self.ablation.constrained_decode else None)
        else:
            tags = argmax_decode(em)
        return decode_tags(tags, inst.unit_offsets, self.scheme)

    def predict_documents(
        self, docs: Iterable[Document], vocab: Vocabulary, batch_size: int = 32, model_id: str = "pred"
    ) -> PredictionSet:
        self.eval()
        out: dict[str, list[EntitySpan]] = {}
        pending: list[Instance] = []
        docs = list(docs)
        for doc in docs:
            out[doc.id] = []
            pending.extend(featurize(doc, vocab, self.scheme, self.ablation, with_gold=False,
                                     max_len=self.encoder.cfg.max_positions))
        pending.sort(key=lambda inst: len(inst.ids))
        with torch.no_grad():
            for a in range(0, len(pending), batch_size):
                batch = pending[a : a + batch_size]
                for inst, reps in zip(batch, self.represent(batch)):
                    out[inst.doc_id].extend(self.decode_instance(reps.double().numpy(), inst))
        return PredictionSet(model_id, {k: tuple(sorted(v)) for k, v in out.items()})

    # -- persistence

    def checkpoint_payload(self):
        config = asdict(self.encoder.cfg)
        meta = {
            "scheme": self.scheme.kind,
            "label_set": list(self.scheme.label_set),
            "ablation": asdict(self.ablation),
        }
        return "tagger", config, meta, dict(self.named_parameters())

    @classmethod
    def from_checkpoint(cls, header: dict, tensors: dict[str, np.ndarray]) -> "Tagger":
        from .encoder import load_state

        meta = header["meta"]
        encoder = EncoderModel(EncoderConfig(**header["config"]))
        tagger = cls(encoder, TagScheme(meta["scheme"], tuple(meta["label_set"])), Ablation(**meta["ablation"]))
        load_state(tagger, tensors)
        tagger.eval()
        return tagger


def new_tagger(cfg: EncoderConfig, scheme: TagScheme, ablation: Ablation = Ablation(), seed: int = 0) -> Tagger:
    return Tagger(init_encoder(cfg), scheme, ablation, seed)
