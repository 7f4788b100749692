"""Greedy and beam-search decoding with zero Gumbel noise."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compute import no_grad
from .model import DecoderState, Seq2SeqModel


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    state: DecoderState | None
    finished: bool = False
    alignments: tuple[np.ndarray, ...] = ()
    switches: tuple[int, ...] = ()
    plans: tuple[np.ndarray | None, ...] = ()

    def score(self, length_norm: bool = False) -> float:
        if length_norm and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob


@dataclass
class DecodeResult:
    tokens: list[int]
    log_prob: float
    finished: bool
    alignments: np.ndarray
    switches: list[int] = field(default_factory=list)
    plans: list[np.ndarray | None] = field(default_factory=list)


def _extend(model, ann, hyp: Hypothesis, token: int, logp_row: np.ndarray, new_state: DecoderState) -> Hypothesis:
    ps = new_state.planner
    plan = ps.plan.matrix.data if ps.committed and ps.plan is not None else None
    return Hypothesis(
        hyp.tokens + (token,),
        hyp.log_prob + float(logp_row[token]),
        new_state,
        token == model.config.eos,
        hyp.alignments + (ps.alpha.data[0],),
        hyp.switches + (_switch_before(hyp.state),),
        hyp.plans + (plan,),
    )


def _switch_before(state: DecoderState) -> int:
    c = state.planner.commitment
    return 1 if c is None else c.switch


def _result(hyp: Hypothesis) -> DecodeResult:
    align = np.vstack(hyp.alignments) if hyp.alignments else np.zeros((0, 0))
    return DecodeResult(list(hyp.tokens), hyp.log_prob, hyp.finished, align, list(hyp.switches), list(hyp.plans))


def greedy_decode(model: Seq2SeqModel, source: Sequence[int], max_len: int) -> DecodeResult:
    """Pick the most likely token at each step until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        ann = model.encode(source)
        hyp = Hypothesis((), 0.0, model.initial_state(ann))
        while not hyp.finished and len(hyp.tokens) < max_len:
            prev = hyp.tokens[-1] if hyp.tokens else model.config.bos
            logp, state = model.step(ann, hyp.state, prev)
            row = logp.data[0]
            hyp = _extend(model, ann, hyp, int(np.argmax(row)), row, state)
    return _result(hyp)


def beam_search(model: Seq2SeqModel, source: Sequence[int], beam_width: int, max_len: int,
                length_norm: bool = False) -> DecodeResult:
    """Standard beam search; EOS-terminated hypotheses retire to a finished pool.

    Each step keeps the ``beam_width`` best one-token extensions of the live
    beam (ties: earlier hypothesis, then lower token id).  Planner state is
    part of each hypothesis and is never mutated in place, so siblings stay
    isolated.  If nothing finishes within ``max_len`` the best unfinished
    hypothesis is returned with ``finished=False``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    eos, bos = model.config.eos, model.config.bos
    with no_grad():
        ann = model.encode(source)
        beam = [Hypothesis((), 0.0, model.initial_state(ann))]
        pool: list[Hypothesis] = []
        for _ in range(max_len):
            cands = []
            for bi, hyp in enumerate(beam):
                prev = hyp.tokens[-1] if hyp.tokens else bos
                logp, state = model.step(ann, hyp.state, prev)
                row = logp.data[0]
                for tok in np.argsort(-row, kind="stable")[:beam_width]:
                    cands.append((-(hyp.log_prob + row[tok]), bi, int(tok), row, state))
            cands.sort(key=lambda c: c[:3])
            live, beam = beam, []
            for _, bi, tok, row, state in cands[:beam_width]:
                new = _extend(model, ann, live[bi], tok, row, state)
                (pool if tok == eos else beam).append(new)
            if not beam:
                break
            if not length_norm and pool:
                if max(h.log_prob for h in pool) >= max(h.log_prob for h in beam):
                    break
    key = lambda h: h.score(length_norm)
    if pool:
        return _result(max(pool, key=key))
    return _result(max(beam, key=key))
