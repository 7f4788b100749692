"""Encoder-decoder with a pluggable alignment planner and a deep output layer."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .compute import ContractError, Tensor, concat, gather_rows, matmul, mul, sum_all, tanh
from .layers import EncoderAnnotations, GruCell, Linear, Mlp, Module, deep_output, encode_bidirectional, uniform_init
from .planner import (
    ZERO_NOISE, GumbelNoise, Planner, PlannerConfig, PlannerState, commitment_penalty,
)


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    embed_dim: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 64
    out_hidden: int = 64
    dec_layers: int = 1
    layer_norm: bool = False
    bos: int = 1
    eos: int = 2
    pad: int = 0
    seed: int = 0
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self):
        if self.dec_layers not in (1, 2):
            raise ValueError(f"dec_layers must be 1 or 2, got {self.dec_layers}")
        for name in ("src_vocab", "tgt_vocab", "embed_dim", "enc_hidden", "dec_hidden", "out_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for tok in (self.bos, self.eos, self.pad):
            if not 0 <= tok < self.tgt_vocab:
                raise ValueError(f"special token id {tok} outside target vocabulary")

    @property
    def mode(self) -> str:
        return self.planner.mode

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["planner"] = PlannerConfig(**d.get("planner", {}))
        return cls(**d)


@dataclass(frozen=True)
class DecoderState:
    hidden: tuple[Tensor, ...]
    planner: PlannerState


@dataclass
class ForwardResult:
    loss: Tensor
    alignments: list[np.ndarray]
    commitments: list[Tensor]
    switches: list[int]
    plans: list[np.ndarray | None]


class Seq2SeqModel(Module):
    """Bidirectional GRU encoder, GRU decoder (1 or 2 layers), planner, deep output.

    The planner reads the first decoder layer's previous state in the planning
    modes and the top layer's in baseline mode; the output layer reads the
    top layer.  With one layer both are the same state.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        e, he, hd = config.embed_dim, config.enc_hidden, config.dec_hidden
        annot = 2 * he
        self.src_embed = uniform_init(rng, config.src_vocab, e)
        self.tgt_embed = uniform_init(rng, config.tgt_vocab, e)
        self.enc_fwd = GruCell(e, he, rng, config.layer_norm)
        self.enc_bwd = GruCell(e, he, rng, config.layer_norm)
        self.init_maps = [Linear(annot, hd, rng) for _ in range(config.dec_layers)]
        self.decoder = [GruCell(e + annot, hd, rng, config.layer_norm)]
        if config.dec_layers == 2:
            self.decoder.append(GruCell(hd + annot, hd, rng, config.layer_norm))
        self.planner = Planner(config.planner, hd, annot, e, rng)
        self.f_o = Mlp([hd + e + annot, config.out_hidden], ["tanh"], rng)
        self.w_o = Linear(config.out_hidden, config.tgt_vocab, rng)

    @property
    def mode(self) -> str:
        return self.config.mode

    # -------------------------------------------------------------- pieces

    def encode(self, source: Sequence[int]) -> EncoderAnnotations:
        if len(source) == 0:
            raise ContractError("empty source sequence")
        _check_ids(source, self.config.src_vocab, "source")
        return encode_bidirectional(self.enc_fwd, self.enc_bwd, gather_rows(self.src_embed, source))

    def initial_state(self, ann: EncoderAnnotations) -> DecoderState:
        mean = matmul(Tensor(np.full((1, len(ann)), 1.0 / len(ann))), ann.matrix)
        hidden = tuple(tanh(m(mean)) for m in self.init_maps)
        return DecoderState(hidden, self.planner.init_state(ann))

    def step(self, ann: EncoderAnnotations, state: DecoderState, y_prev: int | Tensor,
             noise: GumbelNoise = ZERO_NOISE, straight_through_gate: bool = True,
             ) -> tuple[Tensor, DecoderState]:
        """One decoder step: plan/attend, advance the GRU stack, score the next token.

        Returns ``(log_probs, new_state)``; ``new_state.planner.alpha`` is the
        alignment used for this step.
        """
        y_emb = y_prev if isinstance(y_prev, Tensor) else gather_rows(self.tgt_embed, [y_prev])
        plan_src = state.hidden[-1] if self.mode == "baseline" else state.hidden[0]
        alpha, pstate = self.planner.step(state.planner, plan_src, ann, y_emb, noise, straight_through_gate)
        psi = matmul(alpha, ann.matrix)
        if self.mode == "rpag":
            pstate = replace(pstate, psi=psi)
        hidden = []
        x = concat([y_emb, psi])
        for cell, h in zip(self.decoder, state.hidden):
            h = cell.step(cell.project(x), h)
            hidden.append(h)
            x = concat([h, psi])
        logp = deep_output(self.f_o, self.w_o, hidden[-1], y_emb, psi)
        return logp, DecoderState(tuple(hidden), pstate)


def _check_ids(ids: Sequence[int], size: int, what: str) -> None:
    for i in ids:
        if not 0 <= int(i) < size:
            raise ValueError(f"{what} token id {i} outside vocabulary of size {size}")


def forward_nll(model: Seq2SeqModel, source: Sequence[int], target: Sequence[int],
                noise: GumbelNoise = ZERO_NOISE, straight_through_gate: bool = True) -> ForwardResult:
    """Teacher-forced mean per-token negative log-likelihood of ``target``.

    ``target`` is the full output sequence including the final EOS; the
    decoder is fed BOS followed by ``target[:-1]``.
    """
    if len(target) == 0:
        raise ContractError("empty target sequence")
    cfg = model.config
    _check_ids(target, cfg.tgt_vocab, "target")
    ann = model.encode(source)
    state = model.initial_state(ann)
    inputs = gather_rows(model.tgt_embed, [cfg.bos, *target[:-1]])
    rows, alignments, commitments, switches, plans = [], [], [], [], []
    for t in range(len(target)):
        g = state.planner.commitment.switch if state.planner.commitment is not None else 1
        logp, state = model.step(ann, state, inputs[t], noise, straight_through_gate)
        rows.append(logp)
        ps = state.planner
        alignments.append(ps.alpha.data[0].copy())
        switches.append(g)
        if ps.committed:
            commitments.append(ps.commitment.soft)
        plans.append(ps.plan.matrix.data.copy() if ps.committed and ps.plan is not None else None)
    picks = np.zeros((len(target), cfg.tgt_vocab))
    picks[np.arange(len(target)), list(target)] = -1.0 / len(target)
    loss = sum_all(mul(concat(rows, axis=0), Tensor(picks)))
    return ForwardResult(loss, alignments, commitments, switches, plans)


def total_loss(nll: Tensor, commitments: list[Tensor], lambda_com: float, k: int) -> Tensor:
    """NLL plus the commitment penalty (absent in baseline mode, where no commitments exist)."""
    if lambda_com == 0 or not commitments:
        return nll
    return nll + commitment_penalty(commitments, k, lambda_com)
