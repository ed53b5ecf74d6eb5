"""Greedy and beam search over an abstract step interface.

A *state* exposes ``logprobs`` (next-token log-probabilities, full vocabulary)
and ``tokens``; ``advance(state, token)`` returns the successor state.  The
captioning model provides this through ``CaptionModel.start`` / ``advance``;
tests plug in small rigged step functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tokenizer import BOS, EOS, PAD

BANNED = (PAD, BOS)


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, BOS excluded, EOS included if finished
    logp: float
    finished: bool

    @property
    def score(self) -> float:
        """Length-normalised log-probability."""
        return self.logp / max(len(self.tokens), 1)


def _allowed(logprobs: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    lp = np.array(logprobs, dtype=np.float64, copy=True)
    for b in banned:
        if 0 <= b < lp.size:
            lp[b] = -np.inf
    return lp


def greedy_search(state, advance: Callable, max_new: int, eos: int = EOS, banned: Sequence[int] = BANNED) -> Hypothesis:
    """Argmax decoding; ties go to the lowest token id."""
    tokens: list[int] = []
    logp = 0.0
    while len(tokens) < max_new:
        lp = _allowed(state.logprobs, banned)
        tok = int(np.argmax(lp))
        tokens.append(tok)
        logp += float(lp[tok])
        if tok == eos:
            return Hypothesis(tokens, logp, True)
        if len(tokens) < max_new:
            state = advance(state, tok)
    return Hypothesis(tokens, logp, False)


def beam_search(
    state,
    advance: Callable,
    beam_size: int,
    max_new: int,
    eos: int = EOS,
    banned: Sequence[int] = BANNED,
) -> list[Hypothesis]:
    """Standard beam search returning up to ``beam_size`` hypotheses, best first.

    Expansion keeps the ``beam_size`` best raw log-probabilities; hypotheses that
    emit EOS (or reach ``max_new`` tokens) leave the active beam.  The final pool
    is ranked by length-normalised score.  Sorting is stable, so ties resolve to
    the earlier beam / lower token id, which makes ``beam_size=1`` identical to
    :func:`greedy_search`.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    active: list[tuple[Hypothesis, object]] = [(Hypothesis([], 0.0, False), state)]
    done: list[Hypothesis] = []
    for _ in range(max_new):
        cands = []
        for bi, (hyp, st) in enumerate(active):
            lp = _allowed(st.logprobs, banned)
            top = np.argsort(-lp, kind="stable")[:beam_size]
            for tok in top:
                if np.isfinite(lp[tok]):
                    cands.append((hyp.logp + float(lp[tok]), bi, int(tok)))
        # stable: equal scores keep (beam, token) order
        cands.sort(key=lambda c: -c[0])
        nxt = []
        for logp, bi, tok in cands[:beam_size]:
            hyp, st = active[bi]
            tokens = hyp.tokens + [tok]
            if tok == eos:
                done.append(Hypothesis(tokens, logp, True))
            elif len(tokens) >= max_new:
                done.append(Hypothesis(tokens, logp, False))
            else:
                nxt.append((Hypothesis(tokens, logp, False), advance(st, tok)))
        active = nxt
        if not active:
            break
    pool = sorted(done, key=lambda h: -h.score)
    return pool[:beam_size]


# -- model convenience ------------------------------------------------------------
def decode_greedy(model, grid, memory_captions=()) -> list[int]:
    """Greedy token ids (without BOS, EOS stripped) for one image."""
    hyp = greedy_search(model.start(grid, memory_captions), model.advance, model.cfg.max_len - 1)
    return _strip(hyp.tokens)


def decode_beam(model, grid, memory_captions=(), beam_size: int = 3) -> list[list[int]]:
    hyps = beam_search(model.start(grid, memory_captions), model.advance, beam_size, model.cfg.max_len - 1)
    return [_strip(h.tokens) for h in hyps]


def _strip(tokens: list[int]) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == EOS else list(tokens)
