"""Linear-chain CRF output layer in 64-bit log space.

Emissions are an affine map of the encoder representations; the sequence score is
``start[y0] + sum_t em[t, y_t] + sum_t T[y_t, y_t+1] + end[y_n]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .corpus import TagScheme

MASK_PENALTY = -1e4


@dataclass
class CrfParams:
    W: np.ndarray  # [d, Y]
    b: np.ndarray  # [Y]
    T: np.ndarray  # [Y, Y], T[i, j] scores i -> j
    start: np.ndarray  # [Y]
    end: np.ndarray  # [Y]

    @property
    def num_tags(self) -> int:
        return self.T.shape[0]

    @classmethod
    def zeros(cls, d: int, num_tags: int) -> "CrfParams":
        return cls(
            np.zeros((d, num_tags)), np.zeros(num_tags), np.zeros((num_tags, num_tags)),
            np.zeros(num_tags), np.zeros(num_tags),
        )

    def as64(self) -> "CrfParams":
        return CrfParams(*(np.asarray(a, dtype=np.float64) for a in (self.W, self.b, self.T, self.start, self.end)))


@dataclass(frozen=True)
class TransitionMask:
    start: np.ndarray  # [Y] bool
    trans: np.ndarray  # [Y, Y] bool
    end: np.ndarray  # [Y] bool

    def allows(self, tags) -> bool:
        tags = list(tags)
        if not tags:
            return True
        if not (self.start[tags[0]] and self.end[tags[-1]]):
            return False
        return all(self.trans[a, b] for a, b in zip(tags, tags[1:]))


def build_transition_mask(scheme: TagScheme) -> TransitionMask:
    tags = scheme.tags
    Y = len(tags)
    start = np.zeros(Y, bool)
    end = np.zeros(Y, bool)
    trans = np.zeros((Y, Y), bool)
    parsed = [scheme.parse(t) for t in tags]
    biose = scheme.kind == "BIOSE"
    for i, (p, label) in enumerate(parsed):
        start[i] = p in ("O", "B", "S")
        end[i] = p in ("O", "E", "S") if biose else True
        for j, (q, label2) in enumerate(parsed):
            if p == "B" or (p == "I" and biose):
                # inside an open chunk: must continue it
                allowed = q in (("I", "E") if biose else ("I",)) and label2 == label
                if not biose:
                    allowed = allowed or q in ("O", "B")
            elif p == "I":  # BIO
                allowed = q in ("O", "B") or (q == "I" and label2 == label)
            else:  # O, E, S
                allowed = q in ("O", "B", "S")
            trans[i, j] = allowed
    return TransitionMask(start, trans, end)


def _masked(params: CrfParams, mask: TransitionMask | None, fill: float):
    if mask is None:
        return params.T, params.start, params.end
    return (
        np.where(mask.trans, params.T, fill),
        np.where(mask.start, params.start, fill),
        np.where(mask.end, params.end, fill),
    )


def emissions(W: np.ndarray, b: np.ndarray, reps: np.ndarray) -> np.ndarray:
    return np.asarray(reps, np.float64) @ np.asarray(W, np.float64) + np.asarray(b, np.float64)


def path_score(params: CrfParams, em: np.ndarray, tags) -> float:
    tags = np.asarray(tags, dtype=int)
    n = len(tags)
    score = params.start[tags[0]] + params.end[tags[-1]] + em[np.arange(n), tags].sum()
    score += params.T[tags[:-1], tags[1:]].sum()
    return float(score)


def _forward(T, start, end, em):
    n = em.shape[0]
    alpha = np.empty_like(em)
    alpha[0] = start + em[0]
    for t in range(1, n):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + T, axis=0) + em[t]
    return alpha, logsumexp(alpha[-1] + end)


def _backward(T, end, em):
    n = em.shape[0]
    beta = np.empty_like(em)
    beta[-1] = end
    for t in range(n - 2, -1, -1):
        beta[t] = logsumexp(T + (em[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def log_partition(params: CrfParams, em: np.ndarray, mask: TransitionMask | None = None) -> float:
    em = np.asarray(em, np.float64)
    if em.shape[0] == 0:
        raise ValueError("log_partition of an empty sequence")
    T, start, end = _masked(params, mask, MASK_PENALTY)
    return float(_forward(T, start, end, em)[1])


def marginals(params: CrfParams, em: np.ndarray, mask: TransitionMask | None = None):
    """(logZ, unary marginals [n, Y], pairwise marginals [n-1, Y, Y])."""
    em = np.asarray(em, np.float64)
    T, start, end = _masked(params, mask, MASK_PENALTY)
    alpha, logz = _forward(T, start, end, em)
    beta = _backward(T, end, em)
    unary = np.exp(alpha + beta - logz)
    pair = np.exp(
        alpha[:-1, :, None] + T[None] + (em[1:] + beta[1:])[:, None, :] - logz
    )
    return float(logz), unary, pair


@dataclass
class CrfGrads:
    W: np.ndarray
    b: np.ndarray
    T: np.ndarray
    start: np.ndarray
    end: np.ndarray
    reps: np.ndarray


def nll_and_grads(
    params: CrfParams, reps: np.ndarray, gold, mask: TransitionMask | None = None
) -> tuple[float, CrfGrads]:
    """Negative log-likelihood of ``gold`` and its exact gradients.

    Gradients are expected minus observed feature counts from forward-backward;
    the representation gradient is ``(marginals - onehot(gold)) @ W.T``.
    """
    reps = np.asarray(reps, np.float64)
    gold = np.asarray(gold, dtype=int)
    Y = params.num_tags
    if gold.min() < 0 or gold.max() >= Y:
        raise ValueError("gold tag outside the alphabet")
    em = emissions(params.W, params.b, reps)
    logz, unary, pair = marginals(params, em, mask)
    T, start, end = _masked(params, mask, MASK_PENALTY)
    masked = CrfParams(params.W, params.b, T, start, end)
    nll = logz - path_score(masked, em, gold)

    n = len(gold)
    d_em = unary.copy()
    d_em[np.arange(n), gold] -= 1.0
    d_T = pair.sum(axis=0)
    np.subtract.at(d_T, (gold[:-1], gold[1:]), 1.0)
    d_start = unary[0].copy()
    d_start[gold[0]] -= 1.0
    d_end = unary[-1].copy()
    d_end[gold[-1]] -= 1.0
    if mask is not None:
        # masked entries are constants, not parameters
        d_T = np.where(mask.trans, d_T, 0.0)
        d_start = np.where(mask.start, d_start, 0.0)
        d_end = np.where(mask.end, d_end, 0.0)
    grads = CrfGrads(
        W=reps.T @ d_em, b=d_em.sum(axis=0), T=d_T, start=d_start, end=d_end,
        reps=d_em @ np.asarray(params.W, np.float64).T,
    )
    return float(nll), grads


def viterbi(params: CrfParams, em: np.ndarray, mask: TransitionMask | None = None) -> list[int]:
    """Best tag sequence; ties resolve to the lowest tag index at every decision."""
    em = np.asarray(em, np.float64)
    n, Y = em.shape
    if n == 0:
        return []
    T, start, end = _masked(params.as64(), mask, -np.inf)
    score = start + em[0]
    back = np.zeros((n, Y), dtype=int)
    for t in range(1, n):
        cand = score[:, None] + T
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(Y)] + em[t]
    final = score + end
    if not np.isfinite(final.max()):
        raise ValueError("transition mask admits no path")
    best = [int(np.argmax(final))]
    for t in range(n - 1, 0, -1):
        best.append(int(back[t, best[-1]]))
    return best[::-1]


# ---------------------------------------------------------------- "- CRF" ablation


def softmax_nll_and_grads(params: CrfParams, reps: np.ndarray, gold) -> tuple[float, CrfGrads]:
    """Independent per-position softmax cross-entropy (summed), same gradient layout."""
    reps = np.asarray(reps, np.float64)
    gold = np.asarray(gold, dtype=int)
    em = emissions(params.W, params.b, reps)
    logp = em - logsumexp(em, axis=1, keepdims=True)
    n = len(gold)
    nll = -float(logp[np.arange(n), gold].sum())
    d_em = np.exp(logp)
    d_em[np.arange(n), gold] -= 1.0
    Y = params.num_tags
    grads = CrfGrads(
        W=reps.T @ d_em, b=d_em.sum(axis=0), T=np.zeros((Y, Y)), start=np.zeros(Y), end=np.zeros(Y),
        reps=d_em @ np.asarray(params.W, np.float64).T,
    )
    return nll, grads


def argmax_decode(em: np.ndarray) -> list[int]:
    return [int(i) for i in np.argmax(em, axis=1)]
