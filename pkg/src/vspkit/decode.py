"""Greedy and beam-search decoding over an embedded prefix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .lm import DecoderLM


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool
    score: float

    def answer(self, eos_id: int) -> tuple[int, ...]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == eos_id else self.tokens


def _check_room(lm: DecoderLM, prefix: torch.Tensor, max_new_tokens: int) -> None:
    if prefix.shape[0] + max_new_tokens > lm.config.max_len:
        raise ValueError(
            f"prefix of {prefix.shape[0]} plus {max_new_tokens} new tokens exceeds max_len {lm.config.max_len}"
        )


@torch.no_grad()
def next_logprobs(lm: DecoderLM, prefix: torch.Tensor, continuations) -> np.ndarray:
    """Float64 log-probabilities of the next token after ``prefix + continuation`` for each continuation."""
    rows = []
    for toks in continuations:
        if toks:
            ext = lm.embed(torch.tensor(toks, dtype=torch.long)).to(prefix.dtype)
            rows.append(torch.cat([prefix, ext]))
        else:
            rows.append(prefix)
    logits = lm(torch.stack(rows))[:, -1].double()
    return logits.log_softmax(-1).numpy()


def _score(logprob: float, length: int, alpha: float) -> float:
    return logprob if alpha == 0 else logprob / (length**alpha)


def greedy(lm: DecoderLM, prefix: torch.Tensor, max_new_tokens: int, eos_id: int) -> Hypothesis:
    _check_room(lm, prefix, max_new_tokens)
    was_training = lm.training
    lm.eval()
    tokens: list[int] = []
    total = 0.0
    try:
        for _ in range(max_new_tokens):
            row = next_logprobs(lm, prefix, [tokens])[0]
            tok = int(np.argmax(row))
            tokens.append(tok)
            total += float(row[tok])
            if tok == eos_id:
                break
    finally:
        lm.train(was_training)
    return Hypothesis(tuple(tokens), total, True, total)


def _rank(h: Hypothesis):
    return (-h.score, h.tokens)


def beam(
    lm: DecoderLM,
    prefix: torch.Tensor,
    width: int,
    length_penalty_alpha: float,
    max_new_tokens: int,
    eos_id: int,
) -> Hypothesis:
    """Beam search scoring ``logprob / len^alpha``; alpha = 0 ranks by raw log-probability.

    A single fixed-width pass can lose to a narrower one (a path that a
    narrow beam would follow to a good end gets crowded out early), so the
    result is the best of the passes at ``width, width // 2, ..., 1``.  This
    makes the score non-decreasing along that ladder and never worse than
    greedy, for about twice the cost of one pass.  Ties prefer the
    lexicographically smaller token sequence.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    _check_room(lm, prefix, max_new_tokens)
    results = []
    w = width
    while w >= 1:
        results.append(beam_pass(lm, prefix, w, length_penalty_alpha, max_new_tokens, eos_id))
        w //= 2
    return min(results, key=_rank)


def beam_pass(
    lm: DecoderLM,
    prefix: torch.Tensor,
    width: int,
    length_penalty_alpha: float,
    max_new_tokens: int,
    eos_id: int,
) -> Hypothesis:
    """One fixed-width pass.

    Each step keeps the top ``width`` expansions; those ending in EOS (or at
    ``max_new_tokens``) retire to a pool.  The pass stops once no live beam
    can still outscore the pool's best.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    _check_room(lm, prefix, max_new_tokens)
    alpha = float(length_penalty_alpha)
    was_training = lm.training
    lm.eval()
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    pool: list[Hypothesis] = []

    def key(h):
        return (-h[2], h[0])

    try:
        for _ in range(max_new_tokens):
            logp = next_logprobs(lm, prefix, [t for t, _ in live])
            cands = []
            for (toks, lp), row in zip(live, logp):
                top = np.argsort(-row, kind="stable")[:width]
                for tok in top:
                    new_toks = toks + (int(tok),)
                    new_lp = lp + float(row[tok])
                    cands.append((new_toks, new_lp, _score(new_lp, len(new_toks), alpha)))
            cands.sort(key=key)
            live = []
            for toks, lp, sc in cands[:width]:
                if toks[-1] == eos_id or len(toks) == max_new_tokens:
                    pool.append(Hypothesis(toks, lp, True, sc))
                else:
                    live.append((toks, lp))
            if not live:
                break
            if pool:
                best = max(h.score for h in pool)
                optimistic = max(
                    max(_score(lp, len(t) + 1, alpha), _score(lp, max_new_tokens, alpha)) for t, lp in live
                )
                if optimistic < best:
                    break
    finally:
        lm.train(was_training)
    return min(pool, key=_rank)


@torch.no_grad()
def sequence_logprob(lm: DecoderLM, prefix: torch.Tensor, tokens) -> float:
    """Teacher-forced log-probability of ``tokens`` following ``prefix``."""
    was_training = lm.training
    lm.eval()
    try:
        tokens = list(tokens)
        x = prefix
        if len(tokens) > 1:
            x = torch.cat([prefix, lm.embed(torch.tensor(tokens[:-1], dtype=torch.long)).to(prefix.dtype)])
        logp = lm(x).double().log_softmax(-1)
        start = prefix.shape[0] - 1
        return float(sum(logp[start + i, t] for i, t in enumerate(tokens)))
    finally:
        lm.train(was_training)
